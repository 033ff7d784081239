use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dscl_cli::{
    cmd_bench, cmd_eval, cmd_eval_kfold, cmd_export_embeddings, cmd_generate, cmd_train, default_checkpoint,
    CliResult, RunConfig, Stage,
};

#[derive(Parser)]
#[command(name = "dscl", version, about = "Saliency-augmented contrastive training on synthetic endoscopy-like images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.lr_sa=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as an image folder.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train stage 1, stage 2 or both on the configured fold.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Evaluate a checkpoint, or train and evaluate every fold with --kfold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kfold: bool,
    },
    /// Time inference of a checkpoint.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output JSON file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write extractor features of every sample as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { common, out, force } => {
            let n = cmd_generate(&common.load()?, &out, force)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Train { common, run_dir, stage } => {
            let cfg = common.load()?;
            let dir = run_dir.unwrap_or_else(|| cfg.paths.run_dir.clone());
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
                StageArg::Both => Stage::Both,
            };
            if let Some(r) = cmd_train(&cfg, &dir, stage)? {
                println!("OA {:.4} kappa {:.4}", r.overall_accuracy, r.cohens_kappa);
            }
        }
        Command::Eval { common, checkpoint, out, kfold } => {
            let cfg = common.load()?;
            if kfold {
                let agg = cmd_eval_kfold(&cfg, &out)?;
                println!("OA {} over {} folds", agg.summary, agg.folds);
            } else {
                let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
                let r = cmd_eval(&cfg, &ckpt, &out)?;
                println!("OA {:.4} kappa {:.4}", r.overall_accuracy, r.cohens_kappa);
            }
        }
        Command::Bench { common, checkpoint, out } => {
            let cfg = common.load()?;
            let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let report = serde_json::to_string_pretty(&cmd_bench(&cfg, &ckpt)?)?;
            match out {
                Some(p) => std::fs::write(p, report + "\n")?,
                None => println!("{report}"),
            }
        }
        Command::ExportEmbeddings { common, checkpoint, out } => {
            let cfg = common.load()?;
            let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let n = cmd_export_embeddings(&cfg, &ckpt, &out)?;
            println!("wrote {n} embeddings to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
