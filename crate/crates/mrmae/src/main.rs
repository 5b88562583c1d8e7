use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mrmae::commands::{
    absolute, execute, Command, EnsembleRun, EvaluateRun, ImportanceRun, MaskSpec, PredictRun, PseudoRun, RunConfig,
    SelectRun, ShiftRun, SplitChoice, StudentRun, SweepSpec, SynthRun, TrainRun, TrendSpec, DEFAULT_SEED,
};
use mrmae::config::{EnsembleSpec, PolicySpec};
use mrmae::formats::read_json;
use mrmae::synth::SyntheticSpec;

/// Masked autoencoders for multi-layer gridded data: training, implicit
/// ensembles, loss-matrix importance, shift analysis and pseudo-labeling.
#[derive(Parser)]
#[command(name = "mrmae", version)]
struct Cli {
    /// Seed used wherever a configuration does not fix one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of worker threads (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; created if needed.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with planted dependencies.
    Synth {
        /// Synthetic dataset specification (JSON).
        #[arg(long)]
        spec: PathBuf,
    },
    /// Train an autoencoder or a task baseline.
    Train {
        /// Training configuration (JSON); paths are relative to its directory.
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict masked features with a trained model.
    Predict(PredictArgs),
    /// Predict masked features with the implicit ensemble of an autoencoder.
    Ensemble {
        #[command(flatten)]
        predict: PredictArgs,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        /// Write each member's prediction to this file inside --out.
        #[arg(long)]
        dump_members: Option<String>,
    },
    /// Accumulate the loss matrix and summarize feature importance.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        test_count: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        /// `fixed_fraction:P`, `uniform_fraction[:LO:HI]` or `layer_subset:Q`.
        #[arg(long, default_value = "uniform_fraction")]
        policy: String,
        /// Masked passes over the rows.
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// `global`, `layer:NAME` or `feature:INDEX`.
        #[arg(long, default_value = "global")]
        mode: String,
        /// Loss used for the matrix (l1 or l2).
        #[arg(long, default_value = "l1")]
        loss: String,
    },
    /// Variability maps, patch selection and yearly PCA projections.
    Shift {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        test_count: usize,
        /// Layers to analyse (comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
    },
    /// Select local maxima of a variability map.
    SelectPatches {
        /// Raw f32 map.
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        /// Layer name written to the output.
        #[arg(long, default_value = "map")]
        layer: String,
    },
    /// Fill missing values with ensemble pseudo-labels and optionally train a student.
    PseudoLabel {
        #[arg(long)]
        teacher: PathBuf,
        /// Manifest whose missing values are pseudo-labeled.
        #[arg(long)]
        unlabeled: PathBuf,
        /// Labeled manifest whose training rows are prepended.
        #[arg(long)]
        labeled: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        labeled_test_count: usize,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        /// Loss weight of pseudo-labeled rows.
        #[arg(long, default_value_t = 1.0)]
        pseudo_weight: f64,
        /// Student configuration (JSON).
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Accuracy, masking sweeps and accuracy trends of several models.
    Evaluate {
        /// Evaluation configuration (JSON); paths are relative to its directory.
        #[arg(long)]
        config: PathBuf,
        /// Run the masking sweep (default fractions and trials unless configured).
        #[arg(long)]
        sweep: bool,
        /// Fit accuracy trends with permutation p-values.
        #[arg(long)]
        trend: bool,
    },
    /// Repeat a previous run from its run.json.
    Replay {
        run: PathBuf,
    },
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    /// Layers hidden from the model (comma separated).
    #[arg(long, value_delimiter = ',')]
    mask_layers: Vec<String>,
    /// Share of the remaining features hidden at random.
    #[arg(long, default_value_t = 0.0)]
    mask_frac: f64,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long, alias = "iters", default_value_t = 32)]
    ensemble_iters: usize,
    #[arg(long, default_value_t = 0.6)]
    ensemble_mask_frac: f64,
    /// Defaults to --seed.
    #[arg(long)]
    ensemble_seed: Option<u64>,
}

impl EnsembleArgs {
    fn spec(&self, seed: Option<u64>) -> EnsembleSpec {
        EnsembleSpec {
            iterations: self.ensemble_iters,
            mask_frac: self.ensemble_mask_frac,
            seed: self.ensemble_seed.or(seed).unwrap_or(DEFAULT_SEED),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl From<SplitArg> for SplitChoice {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitChoice::Train,
            SplitArg::Test => SplitChoice::Test,
            SplitArg::All => SplitChoice::All,
        }
    }
}

fn parse_policy(s: &str) -> anyhow::Result<PolicySpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.parse::<f64>().with_context(|| format!("bad number {t:?} in policy {s:?}"));
    Ok(match parts.as_slice() {
        ["fixed_fraction", p] => PolicySpec::FixedFraction { p: num(p)?, seed: None },
        ["uniform_fraction"] => PolicySpec::UniformFraction { lo: None, hi: None, seed: None },
        ["uniform_fraction", lo, hi] => PolicySpec::UniformFraction { lo: Some(num(lo)?), hi: Some(num(hi)?), seed: None },
        ["layer_subset", q] => PolicySpec::LayerSubset { q: num(q)?, seed: None },
        _ => anyhow::bail!("unknown policy {s:?} (fixed_fraction:P, uniform_fraction[:LO:HI], layer_subset:Q)"),
    })
}

fn config_dir(path: &Path) -> anyhow::Result<PathBuf> {
    let abs = absolute(path)?;
    Ok(abs.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn predict_run(a: PredictArgs, seed: Option<u64>) -> anyhow::Result<PredictRun> {
    let run = PredictRun {
        model: a.model,
        data: a.data,
        test_count: a.test_count,
        split: a.split.into(),
        mask: MaskSpec { layers: a.mask_layers, fraction: a.mask_frac, seed: seed.unwrap_or(DEFAULT_SEED) },
    };
    Ok(run.resolve(None, Path::new("."))?)
}

/// Turns the command line into a fully resolved command.
fn resolve(cmd: Cmd, seed: Option<u64>) -> anyhow::Result<Command> {
    let cwd = Path::new(".");
    Ok(match cmd {
        Cmd::Synth { spec } => {
            let mut s: SyntheticSpec = read_json(&spec)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            Command::Synth(SynthRun { spec: s })
        }
        Cmd::Train { config } => {
            let run: TrainRun = read_json(&config)?;
            Command::Train(run.resolve(seed, &config_dir(&config)?)?)
        }
        Cmd::Predict(a) => Command::Predict(predict_run(a, seed)?),
        Cmd::Ensemble { predict, ensemble, dump_members } => Command::Ensemble(EnsembleRun {
            inputs: predict_run(predict, seed)?,
            ensemble: ensemble.spec(seed),
            dump_members,
        }),
        Cmd::Importance { model, data, test_count, split, policy, iterations, mode, loss } => {
            let run = ImportanceRun {
                model,
                data,
                test_count,
                split: split.into(),
                policy: parse_policy(&policy)?,
                iterations,
                mode,
                loss,
            };
            Command::Importance(run.resolve(seed, cwd)?)
        }
        Cmd::Shift { data, test_count, layers } => {
            Command::Shift(ShiftRun { data, test_count, layers }.resolve(cwd)?)
        }
        Cmd::SelectPatches { map, rows, cols, layer } => {
            Command::SelectPatches(SelectRun { map: absolute(&map)?, rows, cols, layer })
        }
        Cmd::PseudoLabel { teacher, unlabeled, labeled, labeled_test_count, ensemble, pseudo_weight, student } => {
            let student = match student {
                Some(p) => {
                    let mut s: StudentRun = read_json(&p)?;
                    if let Some(seed) = seed {
                        s.seed = seed;
                    }
                    Some(s)
                }
                None => None,
            };
            let run = PseudoRun {
                teacher,
                unlabeled,
                labeled,
                labeled_test_count,
                ensemble: ensemble.spec(seed),
                pseudo_weight,
                student,
            };
            Command::PseudoLabel(run.resolve(cwd)?)
        }
        Cmd::Evaluate { config, sweep, trend } => {
            let mut run: EvaluateRun = read_json(&config)?;
            if sweep && run.sweep.is_none() {
                run.sweep = Some(SweepSpec::default());
            }
            if trend && run.trend.is_none() {
                run.trend = Some(TrendSpec::default());
            }
            if !sweep {
                run.sweep = None;
            }
            if !trend {
                run.trend = None;
            }
            Command::Evaluate(run.resolve(seed, &config_dir(&config)?)?)
        }
        Cmd::Replay { .. } => unreachable!("handled by the caller"),
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = cli.out.context("--out is required")?;
    let run = match cli.command {
        Cmd::Replay { run } => {
            let mut r: RunConfig = read_json(&run)?;
            if let Some(w) = cli.workers {
                r.workers = w;
            }
            r
        }
        cmd => {
            let workers = cli
                .workers
                .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
            RunConfig::new(workers, resolve(cmd, cli.seed)?)
        }
    };
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    execute(&run, &out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MRMAE_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
