use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsfm_cli::config::RunConfig;
use tsfm_cli::{exit_code, ConfigError, Harness};

#[derive(Parser)]
#[command(
    name = "tsfm",
    version,
    about = "Self-supervised monocular depth, pose and intrinsics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short, default_value = "runs/latest")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<RunConfig, ConfigError> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Args)]
struct HarnessArgs {
    /// Input corruption as `kind:severity`, e.g. `fog:3`.
    #[arg(long)]
    corruption: Option<String>,
    /// Adversarial attack as `kind:epsilon`, e.g. `pgd:4` or `hflip:2`.
    #[arg(long)]
    attack: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train depth and pose networks without labels.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Depth metrics, optionally under a corruption or attack.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        harness: HarnessArgs,
        /// Also report trajectory drift and intrinsics error.
        #[arg(long)]
        pose: bool,
    },
    /// Write adversarial centre frames.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        attack: String,
    },
    /// Write corrupted centre frames.
    Corrupt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corruption: String,
    },
    /// Inference speed and energy.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Randomly initialised weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        passes: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Disparity of single images as `.npy` plus a colour preview.
    ExportDisparity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = common.config()?;
            let r = tsfm_cli::cmd_train(&cfg, &common.out, resume)?;
            println!(
                "trained {} steps, loss {} -> {}, {} checkpoint(s) in {}",
                r.steps,
                fmt_loss(r.first_loss),
                fmt_loss(r.last_loss),
                r.checkpoints.len(),
                common.out.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            harness,
            pose,
        } => {
            let cfg = common.config()?;
            let h = Harness::parse(
                harness.corruption.as_deref(),
                harness.attack.as_deref(),
                cfg.seed(),
            )?;
            let r = tsfm_cli::cmd_eval(&cfg, &checkpoint, &common.out, &h, pose)?;
            print!("{}", r.table);
            if let Some(p) = r.pose {
                println!("{}", serde_json::to_string_pretty(&p)?);
            }
        }
        Command::Attack {
            common,
            checkpoint,
            attack,
        } => {
            let cfg = common.config()?;
            let h = Harness::parse(None, Some(&attack), cfg.seed())?;
            let dir = tsfm_cli::cmd_attack(&cfg, &checkpoint, &common.out, &h)?;
            println!("wrote {}", dir.display());
        }
        Command::Corrupt { common, corruption } => {
            let cfg = common.config()?;
            let h = Harness::parse(Some(&corruption), None, cfg.seed())?;
            let dir = tsfm_cli::cmd_corrupt(&cfg, &common.out, &h)?;
            println!("wrote {}", dir.display());
        }
        Command::Benchmark {
            common,
            checkpoint,
            passes,
            warmup,
        } => {
            let cfg = common.config()?;
            let r =
                tsfm_cli::cmd_benchmark(&cfg, checkpoint.as_deref(), &common.out, passes, warmup)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::ExportDisparity {
            common,
            checkpoint,
            images,
        } => {
            let cfg = common.config()?;
            for e in tsfm_cli::cmd_export_disparity(&cfg, &checkpoint, &images, &common.out)? {
                println!("{} -> {}", e.input.display(), e.array.display());
            }
        }
    }
    Ok(())
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                tsfm_cli::EXIT_CONFIG as u8
            } else {
                0
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
