use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flexkd::harness::{self, ExperimentConfig};
use flexkd::train::{Method, Metric};

#[derive(Parser)]
#[command(name = "flexkd", version, about = "Projector-free feature distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for the stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Share of the training split used for scoring, in (0, 1].
    #[arg(long)]
    calibration_fraction: Option<f64>,
    /// Restrict to one method.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the configured dataset.
    TrainTeacher(Common),
    /// Compute the teacher's importance profile.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Distil students for every configured method and seed.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "accuracy")]
        metric: String,
    },
    /// Aggregate finished runs into report.json and report.md.
    Compare(Common),
    /// Small-activation percentages per hidden layer.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        thresholds: Vec<f64>,
    },
    /// All stages in order.
    Run(Common),
}

fn load(common: &Common) -> flexkd::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(f) = common.calibration_fraction {
        cfg.attribution.calibration_fraction = f;
    }
    if let Some(m) = &common.method {
        cfg.methods = vec![Method::parse(m)?];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> flexkd::Result<()> {
    match cli.command {
        Command::TrainTeacher(common) => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.teacher.seed = s;
            }
            println!("{}", harness::cmd_train_teacher(&cfg)?.display());
        }
        Command::Score { common, teacher } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.attribution.sample_seed = s;
            }
            println!("{}", harness::cmd_score(&cfg, teacher.as_deref())?.display());
        }
        Command::Distill {
            common,
            teacher,
            profile,
        } => {
            let cfg = load(&common)?;
            let seeds = common.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let dirs = harness::cmd_distill(
                &cfg,
                teacher.as_deref(),
                profile.as_deref(),
                &cfg.methods,
                &seeds,
            )?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            metric,
        } => {
            let cfg = load(&common)?;
            let metric = match metric.as_str() {
                "accuracy" => Metric::Accuracy,
                "nll" => Metric::Nll,
                other => {
                    return Err(flexkd::Error::config(format!("unknown metric {other:?}")))
                }
            };
            println!("{}", harness::cmd_evaluate(&cfg, &checkpoint, metric)?);
        }
        Command::Compare(common) => {
            let cfg = load(&common)?;
            print!("{}", harness::cmd_compare(&cfg)?.to_markdown());
        }
        Command::Inspect {
            common,
            checkpoint,
            thresholds,
        } => {
            let cfg = load(&common)?;
            print!("{}", harness::cmd_inspect(&cfg, checkpoint.as_deref(), &thresholds)?.to_text());
        }
        Command::Run(common) => {
            let cfg = load(&common)?;
            print!("{}", harness::run_pipeline(&cfg)?.to_markdown());
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
