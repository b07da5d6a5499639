//! Command-line front end: each subcommand maps onto one stage of the
//! experiment pipeline, plus `run` and `suite` for end-to-end grids.
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use waveprint::eval;
use waveprint::exp::{self, ExpError, ExperimentConfig};
use waveprint::perturb::PerturbSpec;
use waveprint::simsource;

#[derive(Parser)]
#[command(
    name = "waveprint",
    version,
    about = "Source-fingerprint experiments on synthetic speech pipelines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the corpus for an experiment config into OUT/corpus.
    SynthCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute and cache features for every entry of a manifest.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Apply a perturbation to a corpus's test split.
    Perturb {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One of: noise, reverb, speed.
        #[arg(long)]
        kind: String,
        /// SNR in dB, RT60 in seconds, or speed factor.
        #[arg(long)]
        value: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a classifier, writing checkpoint.vtck and history.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained checkpoint on a config's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed the test split with a checkpoint and render tsne.svg.
    Tsne {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment end to end into OUT.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of experiment configs in order; directories expand to
    /// their *.toml files sorted by name.
    Suite {
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild summary.txt from the run directories under OUT.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum AppError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "configuration error: {m}"),
            AppError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<ExpError> for AppError {
    fn from(e: ExpError) -> Self {
        match e {
            ExpError::Config(m) => AppError::Config(m),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> AppError {
    AppError::Runtime(e.to_string())
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig, AppError> {
    let mut cfg = exp::load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn collect_configs(paths: &[PathBuf]) -> Result<Vec<ExperimentConfig>, AppError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut in_dir: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(runtime)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "toml"))
                .collect();
            in_dir.sort();
            if in_dir.is_empty() {
                return Err(AppError::Config(format!("no .toml configs in {}", p.display())));
            }
            files.extend(in_dir);
        } else {
            files.push(p.clone());
        }
    }
    files.iter().map(|f| Ok(exp::load_config(f)?)).collect()
}

fn dispatch(cmd: Cmd) -> Result<(), AppError> {
    match cmd {
        Cmd::SynthCorpus { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let manifest = exp::run_synth(&cfg, &out)?;
            println!("synthesized {} utterances into {}", manifest.entries.len(), out.join("corpus").display());
        }
        Cmd::Extract { manifest } => {
            let n = exp::run_extract(&manifest)?;
            println!("extracted features for {n} utterances");
        }
        Cmd::Perturb { manifest, out, kind, value, seed } => {
            let spec = match kind.as_str() {
                "noise" => PerturbSpec::noise(value, seed),
                "reverb" => PerturbSpec::reverb(value, seed),
                "speed" => PerturbSpec::speed(value, seed),
                other => return Err(AppError::Config(format!("unknown perturbation kind {other:?}"))),
            };
            spec.param().map_err(|e| AppError::Config(e.to_string()))?;
            let m = simsource::read_manifest(&manifest).map_err(runtime)?;
            let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
            let perturbed = waveprint::perturb::perturb_manifest(&m, dir, &spec, &out).map_err(runtime)?;
            let n = perturbed.entries_for(simsource::Split::Test).count();
            println!("perturbed {n} test utterances into {}", out.display());
        }
        Cmd::Train { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let history = exp::run_train(&cfg, &out)?;
            println!(
                "trained {}: best epoch {} with validation macro-F1 {:.4}",
                cfg.experiment_id, history.best_epoch, history.best_val_macro_f1
            );
        }
        Cmd::Eval { config, out, checkpoint, seed } => {
            let cfg = load(&config, seed)?;
            let report = exp::run_eval(&cfg, &out, &checkpoint)?;
            println!("{}", eval::SUMMARY_HEADER);
            println!("{}", eval::summary_row(&cfg.experiment_id, &report));
        }
        Cmd::Tsne { config, out, checkpoint, seed } => {
            let cfg = load(&config, seed)?;
            let path = exp::run_tsne(&cfg, &out, &checkpoint)?;
            println!("wrote {}", path.display());
        }
        Cmd::Run { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let report = exp::run_experiment(&cfg, &out)?;
            println!("{}", eval::SUMMARY_HEADER);
            println!(
                "{:<6} {:>9.2} {:>9.2} {:>9.2}",
                report.experiment_id,
                100.0 * report.macro_precision,
                100.0 * report.macro_recall,
                100.0 * report.macro_f1
            );
        }
        Cmd::Suite { config, out } => {
            let cfgs = collect_configs(&config)?;
            let report = exp::run_suite(&cfgs, &out)?;
            print!("{}", std::fs::read_to_string(out.join("summary.txt")).map_err(runtime)?);
            if report.rows.iter().any(|r| r.status != "ok") {
                return Err(AppError::Runtime("one or more experiments failed".into()));
            }
        }
        Cmd::Report { out } => {
            let text = exp::rebuild_summary(&out)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                AppError::Config(_) => ExitCode::from(2),
                AppError::Runtime(_) => ExitCode::from(3),
            }
        }
    }
}
