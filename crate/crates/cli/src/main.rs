use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use infomap::config::RunConfig;
use infomap_core::probe::MaskMode;

/// Per-location information maps for a few-shot prototype classifier:
/// train, attach estimators, explain.
#[derive(Parser)]
#[command(name = "infomap", version, about)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskModeArg {
    Learned,
    PinOne,
    PinZero,
}

impl From<MaskModeArg> for MaskMode {
    fn from(m: MaskModeArg) -> MaskMode {
        match m {
            MaskModeArg::Learned => MaskMode::Learned,
            MaskModeArg::PinOne => MaskMode::PinOne,
            MaskModeArg::PinZero => MaskMode::PinZero,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (or ingest an image folder) and
    /// persist it.
    SynthData,
    /// Episodic training of the prototype classifier.
    TrainBackbone {
        /// Override the number of training episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the information probe against the frozen backbone.
    TrainMilr {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Mask behavior; pinned modes are for saturation checks.
        #[arg(long, value_enum, default_value = "learned")]
        mask_mode: MaskModeArg,
    },
    /// Render the three information maps for one sampled episode.
    Explain {
        /// Heat/original blend weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Run directory name under the output dir.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Calibrate the contrastive bound against the Gaussian pair oracle.
    Calibrate {
        /// Comma-separated correlations.
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        rho: Vec<f64>,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    match cli.command {
        Command::SynthData => {
            let artifacts = infomap::cmd_synth_data(&cfg)?;
            println!("wrote {}", artifacts[0].display());
        }
        Command::TrainBackbone { episodes } => {
            if let Some(e) = episodes {
                cfg.protonet.episodes = e;
            }
            let (artifacts, stats) = infomap::cmd_train_backbone(&cfg)?;
            let tail = stats.iter().rev().take(100.min(stats.len())).collect::<Vec<_>>();
            let acc = tail.iter().map(|s| s.accuracy).sum::<f64>() / tail.len() as f64;
            println!("wrote {}; mean accuracy over last {} episodes: {acc:.3}", artifacts[0].display(), tail.len());
        }
        Command::TrainMilr { alpha, beta, episodes, mask_mode } => {
            if let Some(a) = alpha {
                cfg.milr.alpha_weight = a;
            }
            if let Some(b) = beta {
                cfg.milr.beta_weight = b;
            }
            if let Some(e) = episodes {
                cfg.milr.episodes = e;
            }
            let (artifacts, stats) = infomap::cmd_train_milr(&cfg, mask_mode.into())?;
            let last = stats.last().map(|s| s.mean_alpha).unwrap_or(f64::NAN);
            println!("wrote {}; final mean alpha: {last:.3}", artifacts[0].display());
        }
        Command::Explain { lambda, run_id } => {
            if let Some(l) = lambda {
                cfg.viz.lambda = l;
            }
            if run_id.is_some() {
                cfg.viz.run_id = run_id;
            }
            let artifacts = infomap::cmd_explain(&cfg)?;
            println!("wrote {} files under {}", artifacts.len(), cfg.output_dir.join(cfg.run_id()).display());
        }
        Command::Calibrate { rho, steps, batch } => {
            let artifacts = infomap::cmd_calibrate(&cfg, &rho, steps, batch)?;
            println!("wrote {}", artifacts[0].display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
