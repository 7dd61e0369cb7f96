use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpmae::cli::{self, report, EvalMode, EvalOverrides, ExperimentConfig, PretrainOverrides};
use mpmae::eval::TaskKind;
use mpmae::losses::LossMode;
use mpmae::{Error, Result};

#[derive(Parser)]
#[command(name = "mpmae", version = env!("CARGO_PKG_VERSION"), about = "Multi-pretext masked autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `<output_dir>/<command>` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides the config and MPMAE_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pretraining and downstream datasets.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<u64>,
        #[arg(long)]
        biomes: Option<u32>,
        #[arg(long)]
        raster: Option<usize>,
        /// Downstream dataset size (0 skips it).
        #[arg(long)]
        downstream_samples: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain on a generated dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// all, s2, pixel, image, or a comma list of task ids.
        #[arg(long)]
        tasks: Option<String>,
        /// equal or uncertainty.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Linear probing, fine-tuning, segmentation and label-efficiency sweeps.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path, optionally `name=path`; repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// Downstream dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// lp, ft or ft-seg.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        sweep: bool,
        /// Comma list of multi-class, multi-label, segmentation.
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Tables and plots from a results store and checkpoints.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding results.json.
        #[arg(long)]
        results: PathBuf,
        /// Pretraining checkpoints for uncertainty curves and reconstructions.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<String>,
        /// Pretraining dataset for reconstruction grids.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn setup(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_dir.join(command))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            common,
            samples,
            biomes,
            raster,
            downstream_samples,
            force,
        } => {
            let mut cfg = setup(&common)?;
            let w = &mut cfg.gen.world;
            if let Some(n) = samples {
                w.samples_total = n;
            }
            if let Some(b) = biomes {
                w.biome_count = b;
                w.ecoregion_count = w.ecoregion_count.max(b);
            }
            if let Some(r) = raster {
                w.raster_size = r;
            }
            if let Some(n) = downstream_samples {
                cfg.gen.downstream.samples = n;
            }
            let out = out_dir(&cfg, &common, "gen");
            let s = cli::cmd_gen(&cfg, &out, force)?;
            println!("wrote {} samples to {}", s.samples, s.dir.display());
            println!("biome,samples");
            for (b, n) in &s.biome_counts {
                println!("{b},{n}");
            }
            println!("dataset hash {}", s.hash);
            if let Some((dir, n)) = s.downstream {
                println!("wrote {n} downstream samples to {}", dir.display());
            }
        }
        Command::Pretrain {
            common,
            data,
            tasks,
            loss,
            epochs,
            resume,
            force,
        } => {
            let mut cfg = setup(&common)?;
            let loss = loss.map(|l| l.parse::<LossMode>()).transpose()?;
            cli::resolve_pretrain(&mut cfg, &PretrainOverrides { tasks, loss, epochs });
            let out = out_dir(&cfg, &common, "pretrain");
            let s = cli::cmd_pretrain(&cfg, &data, &out, resume.as_deref(), force)?;
            println!("T = {} tasks: {}", s.task_ids.len(), s.task_ids.join(", "));
            println!("loss mode {:?}, {} epochs", s.loss_mode, s.epochs);
            if let Some(l) = s.final_loss {
                println!("final loss {l:.6}");
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoints,
            data,
            mode,
            sweep,
            tasks,
            jobs,
        } => {
            let mut cfg = setup(&common)?;
            let mode = mode.map(|m| m.parse::<EvalMode>()).transpose()?;
            let tasks = tasks
                .map(|t| t.split(',').map(|s| s.trim().parse::<TaskKind>()).collect::<Result<Vec<_>>>())
                .transpose()?;
            cli::resolve_eval(&mut cfg, &EvalOverrides { mode, sweep, tasks, jobs });
            let out = out_dir(&cfg, &common, "eval");
            for r in cli::cmd_eval(&cfg, &checkpoints, &data, &out)? {
                println!(
                    "{} {} {} f={} seed={} {}={:.4}",
                    r.checkpoint, r.task, r.mode, r.fraction, r.seed, r.metric, r.value
                );
            }
        }
        Command::Report {
            common,
            results,
            checkpoints,
            data,
        } => {
            let cfg = setup(&common)?;
            let out = out_dir(&cfg, &common, "report");
            let s = report::cmd_report(&cfg, &results, &checkpoints, data.as_deref(), &out)?;
            print!("{}", s.grid);
            if s.curves_omitted {
                println!("no sweep results; label-efficiency curves omitted");
            }
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
