use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tan_core::experiment::{ablation_cmd, eval_cmd, generate_data, spf_cmd, stage_one_cmd, ExperimentConfig};

#[derive(Parser)]
#[command(name = "tan", version, about = "Two-stage cross-domain crater detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source and target domains to disk.
    GenData(Common),
    /// Train the stage-one detector on the source domain.
    Train(Common),
    /// Pseudo-label the target domain and fine-tune the stage-one model.
    Spf(Common),
    /// Evaluate a checkpoint and write metrics and PR-curve artifacts.
    Eval(Common),
    /// Run the component ablation grid over several seeds.
    Ablation(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            for dir in generate_data(&cfg, &cfg.output_dir)? {
                println!("wrote {}", dir.display());
            }
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let s1 = stage_one_cmd(&cfg, &cfg.output_dir)?;
            if let Some(best) = s1.report.best {
                println!(
                    "best epoch {}: val mAP@.5 {:.4} mAP@.5:.95 {:.4}",
                    s1.report.best_epoch, best.map50, best.map5095
                );
            }
        }
        Command::Spf(c) => {
            let cfg = c.load()?;
            let s2 = spf_cmd(&cfg, &cfg.output_dir)?;
            println!(
                "h = {:.4}: fine-tuned on {} images with {} pseudo-boxes",
                s2.h,
                s2.selected.len(),
                s2.selected.box_count()
            );
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let m = eval_cmd(&cfg, &cfg.output_dir)?;
            println!(
                "precision {:.4} recall {:.4} mAP@.5 {:.4} mAP@.5:.95 {:.4}",
                m.precision, m.recall, m.map50, m.map5095
            );
        }
        Command::Ablation(c) => {
            let cfg = c.load()?;
            println!("row,asaf,shem,bot,recall,map5095");
            for r in ablation_cmd(&cfg, &cfg.output_dir)? {
                let k = r.components;
                println!(
                    "{},{},{},{},{:.4}±{:.4},{:.4}±{:.4}",
                    r.row, k.asaf, k.shem, k.bot, r.recall_mean, r.recall_std, r.map5095_mean, r.map5095_std
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
