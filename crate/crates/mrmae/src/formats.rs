//! On-disk formats: grid manifests and raw grids, the normalized dataset
//! CSV, model checkpoints with their JSON sidecars, loss matrices and the
//! tabular report files. Every writer goes through [`write_atomic`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mrmae_core::dataset::{GridLayer, LayerManifest, LayerPartition, LayeredDataset, NormStats, Split, Timestamp};
use mrmae_core::importance::LossMatrix;
use mrmae_core::linalg::Matrix;
use mrmae_core::nnet::{Activation, MlpModel};
use mrmae_core::rng::RNG_IDENTITY;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoError, Result};

/// Bit pattern marking a missing grid cell.
pub const MISSING_BITS: u32 = 0x7FC0_0000;
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MRMAE1";
pub const DEFAULT_GRID_PATTERN: &str = "{layer}_{year}_{month}.f32";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes `bytes` to a temporary sibling and renames it over `path`, so a
/// reader never observes a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| IoError::format(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| IoError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| IoError::io(&tmp, e))?;
    f.sync_all().map_err(|e| IoError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::Json { path: path.into(), source: e })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| IoError::Json { path: path.into(), source: e })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// Manifest and grids

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON manifest of a gridded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub layers: Vec<ManifestLayer>,
    pub patch_size: usize,
    pub timestamps: Vec<(i32, u8)>,
    #[serde(default = "default_pattern")]
    pub grid_file_pattern: String,
}

fn default_pattern() -> String {
    DEFAULT_GRID_PATTERN.into()
}

impl ManifestFile {
    pub fn from_manifest(m: &LayerManifest) -> Self {
        ManifestFile {
            layers: m.layers.iter().map(|l| ManifestLayer { name: l.name.clone(), rows: l.rows, cols: l.cols }).collect(),
            patch_size: m.patch_size,
            timestamps: m.timestamps.iter().map(|t| (t.year, t.month)).collect(),
            grid_file_pattern: default_pattern(),
        }
    }

    pub fn to_manifest(&self) -> LayerManifest {
        LayerManifest {
            layers: self.layers.iter().map(|l| GridLayer { name: l.name.clone(), rows: l.rows, cols: l.cols }).collect(),
            patch_size: self.patch_size,
            timestamps: self.timestamps.iter().map(|&(y, m)| Timestamp::new(y, m)).collect(),
        }
    }

    /// File name of one grid, from `grid_file_pattern`.
    pub fn grid_name(&self, layer: &str, t: Timestamp) -> String {
        self.grid_file_pattern
            .replace("{layer}", layer)
            .replace("{year}", &t.year.to_string())
            .replace("{month}", &format!("{:02}", t.month))
    }
}

/// Reads a raw little-endian f32 grid. A missing file yields `None`; a file
/// of the wrong size is an error naming the file.
pub fn read_grid(path: &Path, rows: usize, cols: usize) -> Result<Option<Vec<f64>>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(IoError::io(path, e)),
    };
    if bytes.len() != rows * cols * 4 {
        return Err(IoError::Core(mrmae_core::Error::Data(format!(
            "grid file {} has {} bytes, expected {} ({rows}x{cols} f32)",
            path.display(),
            bytes.len(),
            rows * cols * 4
        ))));
    }
    Ok(Some(
        bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
    ))
}

pub fn grid_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| if v.is_nan() { MISSING_BITS.to_le_bytes() } else { v.to_le_bytes() })
        .collect()
}

/// Writes f64 values as a raw f32 grid (NaN → the missing bit pattern).
pub fn write_grid(path: &Path, values: &[f64]) -> Result<()> {
    write_atomic(path, &grid_bytes(values.iter().map(|&v| v as f32)))
}

/// Loads the raw (unnormalized) patch-averaged dataset of a manifest. The
/// last `test_count` timestamps form the test split. Absent grid files load
/// as missing values.
pub fn load_dataset(manifest_path: &Path, test_count: usize) -> Result<LayeredDataset> {
    let file: ManifestFile = read_json(manifest_path)?;
    let manifest = file.to_manifest();
    manifest.validate()?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut grids = Vec::with_capacity(manifest.timestamps.len());
    let mut absent = 0usize;
    for &t in &manifest.timestamps {
        let mut per_layer = Vec::with_capacity(manifest.layers.len());
        for l in &manifest.layers {
            let path = dir.join(file.grid_name(&l.name, t));
            per_layer.push(match read_grid(&path, l.rows, l.cols)? {
                Some(g) => g,
                None => {
                    absent += 1;
                    vec![f64::NAN; l.rows * l.cols]
                }
            });
        }
        grids.push(per_layer);
    }
    if absent > 0 {
        log::info!("{absent} grid files absent under {}; loaded as missing", dir.display());
    }
    Ok(LayeredDataset::from_grids(&manifest, &grids, test_count)?)
}

// ---------------------------------------------------------------------------
// Dataset CSV

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |e| IoError::Csv { path: path.into(), source: e }
}

/// Formats a value so that it parses back bit-exactly; missing is empty.
pub fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

pub fn fmt_timestamp(t: Timestamp) -> String {
    format!("{:04}-{:02}", t.year, t.month)
}

fn parse_timestamp(s: &str) -> Option<Timestamp> {
    let (y, m) = s.split_once('-')?;
    Some(Timestamp::new(y.parse().ok()?, m.parse().ok()?))
}

/// Builds CSV bytes from a header and rows.
pub fn csv_bytes<I, R>(path: &Path, header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.into_inner().map_err(|e| IoError::format(path, e.to_string()))
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let bytes = csv_bytes(path, header, rows)?;
    write_atomic(path, &bytes)
}

pub const DATASET_HEADER: [&str; 5] = ["timestamp", "layer", "patch_row", "patch_col", "value"];

/// Long-format export: one line per (observation, feature).
pub fn write_dataset_csv(path: &Path, partition: &LayerPartition, timestamps: &[Timestamp], rows: &[Vec<f64>]) -> Result<()> {
    let mut lines = Vec::with_capacity(rows.len() * partition.n_features());
    for (t, row) in timestamps.iter().zip(rows) {
        for (j, &v) in row.iter().enumerate() {
            let c = partition.coord(j).expect("row width matches partition");
            let layer = &partition.layers()[c.layer];
            lines.push(vec![
                fmt_timestamp(*t),
                layer.name.clone(),
                c.row.to_string(),
                c.col.to_string(),
                fmt_value(v),
            ]);
        }
    }
    write_csv(path, &DATASET_HEADER, lines)
}

/// A dataset read back from the long-format CSV.
#[derive(Debug, Clone)]
pub struct DatasetTable {
    pub partition: LayerPartition,
    pub timestamps: Vec<Timestamp>,
    pub rows: Vec<Vec<f64>>,
}

/// Reads the long-format CSV. Layer grids are inferred from the largest
/// patch coordinates; layers and observations keep first-appearance order.
pub fn read_dataset_csv(path: &Path) -> Result<DatasetTable> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().collect::<Vec<_>>() != DATASET_HEADER {
        return Err(IoError::format(path, format!("expected header {}", DATASET_HEADER.join(","))));
    }
    let mut layers: Vec<(String, usize, usize)> = Vec::new();
    let mut timestamps: Vec<Timestamp> = Vec::new();
    let mut cells: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = || IoError::format(path, format!("malformed record on data line {}", line + 1));
        let t = parse_timestamp(&rec[0]).ok_or_else(bad)?;
        let ti = match timestamps.last() {
            Some(&last) if last == t => timestamps.len() - 1,
            _ => match timestamps.iter().position(|&x| x == t) {
                Some(i) => i,
                None => {
                    timestamps.push(t);
                    timestamps.len() - 1
                }
            },
        };
        let li = match layers.iter().position(|l| l.0 == rec[1]) {
            Some(i) => i,
            None => {
                layers.push((rec[1].to_string(), 0, 0));
                layers.len() - 1
            }
        };
        let pr: usize = rec[2].parse().map_err(|_| bad())?;
        let pc: usize = rec[3].parse().map_err(|_| bad())?;
        let v: f64 = if rec[4].is_empty() { f64::NAN } else { rec[4].parse().map_err(|_| bad())? };
        layers[li].1 = layers[li].1.max(pr + 1);
        layers[li].2 = layers[li].2.max(pc + 1);
        cells.push((ti, li, pr, pc, v));
    }
    let partition = LayerPartition::new(layers);
    let n = partition.n_features();
    let mut rows = vec![vec![f64::NAN; n]; timestamps.len()];
    for (ti, li, pr, pc, v) in cells {
        let info = &partition.layers()[li];
        rows[ti][info.start + pr * info.patch_cols + pc] = v;
    }
    Ok(DatasetTable { partition, timestamps, rows })
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Serializes layer dims and parameters after the magic bytes.
pub fn checkpoint_bytes(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 + 8 * model.dims().len() + 8 * model.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(model.dims().len() as u32).to_le_bytes());
    for &d in model.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &p in model.parameters() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn parse_checkpoint(path: &Path, bytes: &[u8], activation: Activation) -> Result<MlpModel> {
    let bad = |m: &str| IoError::format(path, format!("invalid checkpoint: {m}"));
    if bytes.len() < 10 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(bad("missing MRMAE1 magic"));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dims_end = 10 + 8 * count;
    if count < 2 || bytes.len() < dims_end {
        return Err(bad("truncated layer dims"));
    }
    let dims: Vec<usize> = bytes[10..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let expected = mrmae_core::nnet::parameter_count(&dims);
    if bytes.len() != dims_end + 8 * expected {
        return Err(bad(&format!("expected {expected} parameters for dims {dims:?}")));
    }
    let params: Vec<f64> =
        bytes[dims_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(MlpModel::from_parameters(&dims, activation, &params)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mae,
    TaskMlp,
    Linear,
    Lasso,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mae => "mae",
            ModelKind::TaskMlp => "task_mlp",
            ModelKind::Linear => "linear",
            ModelKind::Lasso => "lasso",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarLayer {
    pub name: String,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

/// Input/output layers of a task model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarTask {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub input_indices: Vec<usize>,
    pub output_indices: Vec<usize>,
}

/// JSON metadata stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: ModelKind,
    pub dims: Vec<usize>,
    pub activation: String,
    pub seed: u64,
    pub rng: String,
    pub version: String,
    pub norm_stats_hash: String,
    /// Per-layer `(mean, std)` used to normalize the training data.
    pub norm_stats: Vec<(f64, f64)>,
    /// Training-split feature means in normalized units (the imputation values).
    pub feature_means: Vec<f64>,
    pub layers: Vec<SidecarLayer>,
    #[serde(default)]
    pub task: Option<SidecarTask>,
    #[serde(default)]
    pub l1_penalty: Option<f64>,
}

/// Hex SHA-256 of the little-endian `(mean, std)` pairs.
pub fn norm_stats_hash(stats: &[NormStats]) -> String {
    let mut h = Sha256::new();
    for s in stats {
        h.update(s.mean.to_le_bytes());
        h.update(s.std.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Sidecar {
    pub fn new(
        kind: ModelKind,
        model: &MlpModel,
        seed: u64,
        stats: &[NormStats],
        feature_means: &[f64],
        partition: &LayerPartition,
    ) -> Self {
        Sidecar {
            kind,
            dims: model.dims().to_vec(),
            activation: model.activation().name().into(),
            seed,
            rng: RNG_IDENTITY.into(),
            version: VERSION.into(),
            norm_stats_hash: norm_stats_hash(stats),
            norm_stats: stats.iter().map(|s| (s.mean, s.std)).collect(),
            feature_means: feature_means.to_vec(),
            layers: partition
                .layers()
                .iter()
                .map(|l| SidecarLayer { name: l.name.clone(), patch_rows: l.patch_rows, patch_cols: l.patch_cols })
                .collect(),
            task: None,
            l1_penalty: None,
        }
    }

    pub fn norm_stats(&self) -> Vec<NormStats> {
        self.norm_stats.iter().map(|&(mean, std)| NormStats { mean, std }).collect()
    }

    pub fn partition(&self) -> LayerPartition {
        LayerPartition::new(self.layers.iter().map(|l| (l.name.clone(), l.patch_rows, l.patch_cols)))
    }
}

/// Sidecar path of a checkpoint: same stem, `.json` extension.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn write_checkpoint(path: &Path, model: &MlpModel, sidecar: &Sidecar) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model))?;
    write_json(&sidecar_path(path), sidecar)
}

/// A checkpoint with its sidecar.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: MlpModel,
    pub sidecar: Sidecar,
}

pub fn read_checkpoint(path: &Path) -> Result<LoadedModel> {
    let sidecar: Sidecar = read_json(&sidecar_path(path))?;
    let activation = Activation::from_name(&sidecar.activation)
        .ok_or_else(|| IoError::format(sidecar_path(path), format!("unknown activation {}", sidecar.activation)))?;
    let model = parse_checkpoint(path, &read_bytes(path)?, activation)?;
    if model.dims() != sidecar.dims.as_slice() {
        return Err(IoError::format(path, "checkpoint dims disagree with the sidecar"));
    }
    if norm_stats_hash(&sidecar.norm_stats()) != sidecar.norm_stats_hash {
        return Err(IoError::format(sidecar_path(path), "norm_stats hash mismatch"));
    }
    Ok(LoadedModel { model, sidecar })
}

// ---------------------------------------------------------------------------
// Loss matrix

pub fn loss_matrix_bytes(m: &LossMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 * m.sums().len());
    out.extend_from_slice(&(m.n() as u64).to_le_bytes());
    for s in m.sums() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for c in m.counts() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn parse_loss_matrix(path: &Path, bytes: &[u8]) -> Result<LossMatrix> {
    if bytes.len() < 8 {
        return Err(IoError::format(path, "truncated loss matrix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let cells = n.checked_mul(n).ok_or_else(|| IoError::format(path, "loss matrix size overflows"))?;
    if bytes.len() != 8 + 16 * cells {
        return Err(IoError::format(path, format!("loss matrix of n={n} needs {} bytes", 8 + 16 * cells)));
    }
    let body = &bytes[8..];
    let sums = body[..8 * cells].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let counts = body[8 * cells..].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(LossMatrix::from_parts(n, sums, counts)?)
}

// ---------------------------------------------------------------------------
// Helpers shared by commands

/// Normalized rows of a dataset under given statistics, with split tags.
pub fn normalized_rows(ds: &LayeredDataset, stats: &[NormStats]) -> (Matrix, Vec<Split>) {
    let norm = ds.apply_norm(stats);
    (norm.data().clone(), norm.split().to_vec())
}
