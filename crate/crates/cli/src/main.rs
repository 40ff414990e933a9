#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

/// Synthetic-data 2D/3D deformable registration.
#[derive(Parser, Debug)]
#[command(name = "deformreg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON); built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = "DEFORMREG_WORKERS")]
    workers: Option<usize>,
    /// Force single-threaded numerics.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a config file with every field at its default.
    InitConfig {
        #[arg(long, short, default_value = "config.json")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Scale::Desk)]
        scale: Scale,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Write a synthetic chest CT, lung mask and landmarks.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long, short, default_value = "phantom")]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        spacing: Option<f64>,
    },
    /// Generate a training dataset from a preoperative volume.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preop: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        split: Option<f64>,
    },
    /// Train the network on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict a displacement field from one projection.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Projection (`.raw` with `.json` sidecar).
        #[arg(long)]
        projection: PathBuf,
        /// Dataset whose target lattice places the output field.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Landmark TRE / projection distance over a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Score the zero-displacement predictor instead of a checkpoint.
        #[arg(long)]
        zero: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Render a DRR of a volume.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Geometry JSON (`{"intrinsics": .., "pose": ..}`).
        #[arg(long)]
        geometry: Option<PathBuf>,
        /// Use the base geometry of this dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// With `--data`, use this sample's perturbed pose.
        #[arg(long)]
        sample: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Draw original (green) and warped (red) mask contours over a DRR.
    Overlay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> deformreg::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    if common.deterministic {
        cfg.training.deterministic = true;
    }
    cfg.resolve();
    Ok(cfg)
}

fn run(cli: Cli) -> deformreg::Result<()> {
    use commands as c;
    let with_config = |common: &Common, f: &(dyn Fn(RunConfig) -> deformreg::Result<()> + Sync)| {
        let cfg = load_config(common)?;
        cfg.validate()?;
        let threads = if cfg.training.deterministic {
            1
        } else {
            cfg.workers.unwrap_or_else(deformreg::par::num_threads)
        };
        deformreg::par::with_threads(threads, || f(cfg))
    };
    match cli.command {
        Command::InitConfig { out, scale, force } => c::init_config(
            &out,
            match scale {
                Scale::Desk => RunConfig::default(),
                Scale::Paper => RunConfig::paper(),
            },
            force,
        ),
        Command::Phantom {
            common,
            out,
            size,
            spacing,
        } => with_config(&common, &|mut cfg| {
            if let Some(s) = size {
                cfg.phantom.size = s;
            }
            if let Some(s) = spacing {
                cfg.phantom.spacing_mm = s;
            }
            c::phantom(&cfg, &out)
        }),
        Command::Generate {
            common,
            preop,
            out,
            n,
            split,
        } => with_config(&common, &|mut cfg| {
            if let Some(p) = &preop {
                cfg.paths.preop = p.clone();
            }
            if let Some(o) = &out {
                cfg.paths.data_dir = o.clone();
            }
            if let Some(n) = n {
                cfg.dataset.n = n;
            }
            if let Some(s) = split {
                cfg.dataset.split = s;
            }
            cfg.validate()?;
            c::generate(&cfg)
        }),
        Command::Train {
            common,
            data,
            out,
            epochs,
        } => with_config(&common, &|mut cfg| {
            if let Some(d) = &data {
                cfg.paths.data_dir = d.clone();
            }
            if let Some(o) = &out {
                cfg.paths.run_dir = o.clone();
                cfg.paths.checkpoint = None;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            c::train(&cfg)
        }),
        Command::Predict {
            common,
            checkpoint,
            projection,
            data,
            out,
        } => with_config(&common, &|cfg| {
            let ck = checkpoint.clone().unwrap_or_else(|| cfg.checkpoint());
            c::predict(&ck, &projection, data.as_deref(), &out)
        }),
        Command::Eval {
            common,
            checkpoint,
            data,
            landmarks,
            split,
            zero,
            out,
        } => with_config(&common, &|mut cfg| {
            if let Some(d) = &data {
                cfg.paths.data_dir = d.clone();
            }
            if let Some(l) = &landmarks {
                cfg.paths.landmarks = Some(l.clone());
            }
            let ck = if zero {
                None
            } else {
                Some(checkpoint.clone().unwrap_or_else(|| cfg.checkpoint()))
            };
            c::eval(&cfg, ck.as_deref(), split, &out)
        }),
        Command::Render {
            common,
            volume,
            geometry,
            data,
            sample,
            out,
        } => with_config(&common, &|cfg| {
            let vol = volume.clone().unwrap_or_else(|| cfg.paths.preop.clone());
            let geo = c::resolve_geometry(&cfg, &vol, geometry.as_deref(), data.as_deref(), sample.as_deref())?;
            c::render(&cfg, &vol, &geo, &out)
        }),
        Command::Overlay {
            common,
            volume,
            mask,
            field,
            geometry,
            data,
            out,
        } => with_config(&common, &|cfg| {
            let vol = volume.clone().unwrap_or_else(|| cfg.paths.preop.clone());
            let mask = mask
                .clone()
                .or_else(|| cfg.paths.mask.clone())
                .ok_or_else(|| deformreg::Error::InvalidArgument("no mask given (--mask or paths.mask)".into()))?;
            let geo = c::resolve_geometry(&cfg, &vol, geometry.as_deref(), data.as_deref(), None)?;
            c::overlay(&cfg, &vol, &mask, &field, &geo, &out)
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
