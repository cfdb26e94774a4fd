use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use hyperlora_core::analysis::FlattenMode;

use crate::commands::{self, DcaArgs, EvalArgs, ScoreSource};
use crate::config::RunConfig;
use crate::error::{self, AppError, AppResult};

pub const THREADS_ENV: &str = "HYPERLORA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hyperlora", version, about = "Task-conditioned hypernetwork LoRA on synthetic volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task AUC with bootstrap intervals.
    Eval(EvalCmd),
    /// Decision curves from a score file.
    Dca {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        t_lo: f64,
        #[arg(long, default_value_t = 0.80)]
        t_hi: f64,
        #[arg(long, default_value_t = 76)]
        steps: usize,
    },
    /// PCA, MDS and clustering of the per-task LoRA deltas.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Parameter census against closed forms.
    ParamAudit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "scores", "rulebook"])))]
pub struct EvalCmd {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Score with the dataset's planted rulebook instead of a model.
    #[arg(long)]
    rulebook: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bootstrap_iters: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Factors,
    Materialized,
}

impl From<Mode> for FlattenMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Factors => FlattenMode::Factors,
            Mode::Materialized => FlattenMode::Materialized,
        }
    }
}

/// Reads the thread cap. All kernels run on the calling thread, so any
/// positive value is accepted and results never depend on it.
pub fn thread_cap() -> AppResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(AppError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

fn write_out(dir: &Path, name: &str, text: &str) -> AppResult<()> {
    error::create_dir(dir)?;
    error::write(&dir.join(name), text)
}

pub fn run(cli: Cli) -> AppResult<()> {
    thread_cap()?;
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            commands::gen_data(&cfg, &out)?;
            println!("wrote {} samples to {}", cfg.data.n_samples, out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let s = commands::train(&cfg, &data, &out)?;
            println!("best epoch {} of {}; checkpoint in {}", s.best_epoch, s.log.len(), out.display());
        }
        Command::Eval(e) => {
            let source = match (e.checkpoint, e.scores, e.rulebook) {
                (Some(p), None, false) => ScoreSource::Checkpoint(p),
                (None, Some(p), false) => ScoreSource::Scores(p),
                (None, None, true) => ScoreSource::Rulebook,
                _ => return Err(AppError::Usage("choose one of --checkpoint, --scores, --rulebook".into())),
            };
            let args = EvalArgs {
                source,
                data: e.data,
                config: e.config.as_deref().map(RunConfig::load).transpose()?,
                bootstrap_iters: e.bootstrap_iters,
            };
            print!("{}", commands::auc_csv(&commands::eval(&args, &e.out)?));
        }
        Command::Dca {
            scores,
            out,
            t_lo,
            t_hi,
            steps,
        } => {
            let tasks = commands::dca(&scores, &DcaArgs { t_lo, t_hi, steps }, &out)?;
            println!("wrote decision curves for tasks {tasks:?} to {}", out.display());
        }
        Command::Analyze { checkpoint, out, mode } => {
            let r = commands::analyze(&checkpoint, mode.map(Into::into), &out)?;
            println!("k* = {} (silhouette {:.4}), labels {:?}", r.k_star, r.silhouette, r.labels);
        }
        Command::ParamAudit { config, out } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::with_seed(0),
            };
            let table = commands::param_audit(&cfg)?;
            print!("{table}");
            if let Some(dir) = out {
                write_out(&dir, commands::AUDIT_FILE, &table)?;
                cfg.write_to_dir(&dir)?;
            }
        }
    }
    Ok(())
}
