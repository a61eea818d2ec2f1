use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dtasr::harness::{
    cmd_eval, cmd_gen_corpus, cmd_probe, cmd_train_asr, cmd_train_diar, ExperimentConfig, Task, TrainOptions,
};
use dtasr::Result;

#[derive(Parser)]
#[command(name = "dtasr", version, about = "Disentangled-Transformer ASR experiments on synthetic speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training and initialisation seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the single-speaker corpus and the mixture scenarios.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train encoder and decoder on `<data>/train`, selecting on `<data>/dev`.
    TrainAsr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        force: bool,
        /// Continue from a `last.dtck` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the disentangled layers and a speaker decoder on mixtures.
    TrainDiar {
        #[command(flatten)]
        common: Common,
        /// ASR checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Task,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-head smoothness and speaker separability of encoder embeddings.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// 1-based encoder layers, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        /// 1-based heads, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        heads: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write 2-D PCA coordinates with speaker ids.
        #[arg(long)]
        projection: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => {
            let _ = writeln!(std::io::stdout().lock(), "{s}");
        }
        Err(e) => log::error!("report serialisation failed: {e}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common, out, force } => cmd_gen_corpus(&common.load()?, &out, force),
        Command::TrainAsr {
            common,
            data,
            out,
            epochs,
            force,
            resume,
        } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let report = cmd_train_asr(&cfg, &data, &out, &TrainOptions { force, resume })?;
            log::info!("best epoch {:?}, {:.1} s", report.best_epoch, report.wall_clock_s);
            Ok(())
        }
        Command::TrainDiar {
            common,
            checkpoint,
            data,
            out,
            epochs,
            force,
        } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.diar.epochs = e;
            }
            let report = cmd_train_diar(&cfg, &checkpoint, &data, &out, force)?;
            for p in &report.der {
                log::info!("epoch {} {} DER {:.4}", p.epoch, p.split, p.der);
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            task,
            out,
        } => {
            let report = cmd_eval(&checkpoint, &data, task, out.as_deref())?;
            if out.is_none() {
                print_json(&report);
            }
            Ok(())
        }
        Command::Probe {
            checkpoint,
            data,
            layers,
            heads,
            out,
            projection,
        } => cmd_probe(&checkpoint, &data, &layers, &heads, &out, projection.as_deref()).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
