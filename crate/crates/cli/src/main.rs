use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lifelong_diffusion::experiment::{
    run_evaluate, run_generate, run_pretrain, run_report, run_sequence, ExperimentConfig, Overrides,
    RunLayout,
};
use lifelong_diffusion::metrics::alignment::percent1;
use lifelong_diffusion::Error;

#[derive(Parser)]
#[command(name = "ldiff", version, about = "Lifelong personalization of a toy text-to-image diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop the memory (rehearsal and prior) term.
    #[arg(long)]
    no_tame: bool,
    /// Drop the concept distillation term.
    #[arg(long)]
    no_ecd: bool,
    /// Disable region confinement and attention boosting at sampling time.
    #[arg(long)]
    no_caa: bool,
    /// Disable orthogonal attention at sampling time.
    #[arg(long)]
    no_oaa: bool,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            no_tame: self.no_tame,
            no_ecd: self.no_ecd,
            no_caa: self.no_caa,
            no_oaa: self.no_oaa,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model and fit the feature extractor.
    Pretrain(Common),
    /// Learn the task sequence one concept at a time.
    RunSequence {
        #[command(flatten)]
        common: Common,
        /// Continue after the last completed task.
        #[arg(long)]
        resume: bool,
        /// Run directory holding `base/` (defaults to the run directory).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Sample images with attention guidance.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to the last completed task's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Output directory for images and guidance reports.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Measure IA / TA of every learned task after every task.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Plots, tables and a Markdown summary from stored evaluation CSVs.
    Report {
        /// Run directory, or a directory of run directories.
        #[arg(long)]
        out: PathBuf,
    },
}

fn latest_checkpoint(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let layout = RunLayout::new(&cfg.out);
    let done = lifelong_diffusion::experiment::completed_tasks(&layout, cfg.concepts.len())?;
    Ok(if done == 0 {
        layout.base_checkpoint()
    } else {
        layout.checkpoint(done)
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = common.load()?;
            let (_, s) = run_pretrain(&cfg)?;
            println!(
                "base model: {} steps, held-out loss {:.4} -> {:.4}; extractor retrieval {:.3}",
                s.steps_run, s.start_loss, s.end_loss, s.retrieval
            );
        }
        Command::RunSequence { common, resume, base } => {
            let cfg = common.load()?;
            let s = run_sequence(&cfg, base.as_deref(), resume)?;
            println!(
                "{} ({}): {} task(s) complete, resumed after {}",
                cfg.out.display(),
                cfg.method_label(),
                s.completed,
                s.resumed_after
            );
        }
        Command::Generate {
            common,
            checkpoint,
            prompt,
            count,
            images,
        } => {
            let cfg = common.load()?;
            let ckpt = match checkpoint {
                Some(p) => p,
                None => latest_checkpoint(&cfg)?,
            };
            let dir = images.unwrap_or_else(|| cfg.out.join("generated"));
            let out = run_generate(&cfg, &ckpt, &prompt, count, &dir)
                .with_context(|| format!("generating from {}", ckpt.display()))?;
            for g in out {
                println!("{}  {}", g.png.display(), g.report_csv.display());
            }
        }
        Command::Evaluate { common, base } => {
            let cfg = common.load()?;
            let m = run_evaluate(&cfg, base.as_deref())?;
            for (k, l, ia, ta) in m.entries() {
                println!("after task {k}, task {l}: IA {} TA {}", percent1(ia), percent1(ta));
            }
        }
        Command::Report { out } => {
            let bundle = run_report(Path::new(&out))?;
            print!("{}", bundle.ablation_csv());
        }
    }
    Ok(())
}

/// 2: configuration, 3: missing artifact, 4: training failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(
            Error::Config { .. }
            | Error::Json(_)
            | Error::Range(_)
            | Error::UnknownToken(_)
            | Error::EmptyPrompt
            | Error::EmptyTarget
            | Error::Pairing(_),
        ) => 2,
        Some(Error::MissingArtifact(_)) => 3,
        Some(Error::TrainingFailure(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
