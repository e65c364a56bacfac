use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use smsma::experiment::{self, ExperimentConfig, MethodSelection, TrainOptions};

/// Spatial multiscale score-norm anomaly localization on synthetic phantoms.
#[derive(Debug, Parser)]
#[command(name = "smsma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fixed smallest noise level instead of calibration.
    #[arg(long, global = true)]
    sigma_min: Option<f64>,

    /// Fixed largest noise level instead of calibration.
    #[arg(long, global = true)]
    sigma_max: Option<f64>,

    /// Patch side length in pixels.
    #[arg(long, global = true)]
    patch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test phantoms and lesioned test copies.
    GenData,
    /// Calibrate, train the score net, the spatial flow and the baseline.
    Train {
        /// Continue score training from the last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop score training after this many iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Segment the lesioned test images and write metrics.
    Eval {
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
    },
    /// Summarize the aggregate metrics as a Markdown table.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Spatial,
    Baseline,
    Both,
}

impl From<MethodArg> for MethodSelection {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Spatial => MethodSelection::Spatial,
            MethodArg::Baseline => MethodSelection::Baseline,
            MethodArg::Both => MethodSelection::Both,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.sigma_min.is_some() {
        cfg.sigma_min = cli.sigma_min;
    }
    if cli.sigma_max.is_some() {
        cfg.sigma_max = cli.sigma_max;
    }
    if let Some(p) = cli.patch_size {
        cfg.patch_size = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SMS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .with_context(|| format!("SMS_THREADS must be a positive integer, got {raw:?}"))?;
    anyhow::ensure!(n > 0, "SMS_THREADS must be at least 1");
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    let cfg = load_config(&cli)?;
    let out = cfg.out_dir.display().to_string();
    match cli.command {
        Command::GenData => {
            let m = experiment::cmd_gen_data(&cfg).context("gen-data")?;
            println!("wrote {} files under {out}", m.entries.len());
        }
        Command::Train { resume, stop_after } => {
            let s = experiment::cmd_train(&cfg, TrainOptions { resume, stop_after }).context("train")?;
            println!(
                "sigma range [{:.6}, {:.6}], {} score iterations",
                s.schedule.sigma_min(),
                s.schedule.sigma_max(),
                s.score_iterations
            );
            if let Some(l) = s.final_score_loss {
                println!("final score loss {l:.6}");
            }
            if !s.completed {
                println!("score training stopped early; rerun with --resume to continue");
            }
            if let Some(l) = s.final_flow_loss {
                println!("final flow NLL {l:.6}");
            }
        }
        Command::Eval { method } => {
            for a in experiment::cmd_eval(&cfg, method.into()).context("eval")? {
                println!(
                    "{:<9} n={} hd99={:.3} msd={:.3} tpr={:.3} ppv={:.3}",
                    a.method, a.n, a.hd99_mean, a.msd_mean, a.tpr_mean, a.ppv_mean
                );
            }
        }
        Command::Report => print!("{}", experiment::cmd_report(&cfg).context("report")?),
    }
    Ok(())
}
