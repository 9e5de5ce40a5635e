//! Command line front end. Every run is deterministic given the same config
//! file, flags, and seed.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 runtime failure.

mod commands;
mod config;
mod fixture;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gak_core::Error;

use config::{RunConfig, FULL_RESOLUTION};

#[derive(Parser)]
#[command(name = "gak", version, about = "Mesh-anchored Gaussian avatar sampling toolkit")]
struct Cli {
    /// Run configuration file (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config value.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = hardware count). Overrides GAK_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fixture render resolution in pixels.
    #[arg(long, global = true)]
    resolution: Option<u32>,
    /// Run fixtures at full 512 resolution.
    #[arg(long, global = true)]
    full_res: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct AssetArgs {
    /// Built-in fixture: icosphere, torus, or cylinder.
    #[arg(long)]
    fixture: Option<String>,
    /// Mesh OBJ (repeat for a sequence); overrides the fixture.
    #[arg(long = "mesh")]
    meshes: Vec<PathBuf>,
    /// Camera rig JSON.
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Directory of target PNGs.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    anchor_count: Option<usize>,
}

impl AssetArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(f) = &self.fixture {
            cfg.fixture = f.clone();
        }
        if !self.meshes.is_empty() {
            cfg.meshes = self.meshes.clone();
        }
        if let Some(c) = &self.cameras {
            cfg.cameras = Some(c.clone());
        }
        if let Some(t) = &self.targets {
            cfg.targets = Some(t.clone());
        }
        if let Some(n) = self.anchor_count {
            cfg.anchor_count = n;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a Gaussian set at every rig view.
    Render {
        /// Gaussian set file.
        #[arg(long)]
        gaussians: Option<PathBuf>,
        #[command(flatten)]
        assets: AssetArgs,
        /// Also run the exhaustive per-pixel renderer and print the
        /// maximum deviation.
        #[arg(long)]
        oracle: bool,
    },
    /// Build the denoise/rectify step plan and write it as JSON.
    Plan {
        #[arg(long)]
        steps: Option<u32>,
        /// Number of 3D rectification steps (0 = plain denoising plan).
        #[arg(long)]
        rectify_count: Option<u32>,
        #[arg(long)]
        t_split: Option<u32>,
        #[arg(long)]
        eta: Option<f64>,
        /// Print the action timeline.
        #[arg(long)]
        explain: bool,
    },
    /// Fit anchored Gaussians to target views and report held-out PSNR.
    Fit {
        #[command(flatten)]
        assets: AssetArgs,
        #[arg(long)]
        iters: Option<u32>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Leading rig views used for fitting (default anchor_views).
        #[arg(long)]
        train_views: Option<usize>,
    },
    /// Run the sampling chain for one frame.
    Sample {
        #[command(flatten)]
        assets: AssetArgs,
        /// Stub denoiser: oracle, shrink, or noisy-oracle.
        #[arg(long)]
        denoiser: Option<String>,
        #[arg(long)]
        amplitude: Option<f64>,
    },
    /// Sample a frame sequence with Gaussian consistency between frames.
    Animate {
        #[command(flatten)]
        assets: AssetArgs,
        #[arg(long)]
        denoiser: Option<String>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        frames: Option<usize>,
        /// Timestep the resumed per-frame chain starts from.
        #[arg(long)]
        t_resume: Option<u32>,
        /// Run the full chain independently per frame instead of resuming
        /// from the previous frame's Gaussians.
        #[arg(long)]
        independent: bool,
    },
    /// Compare two directories of equally named PNGs (CSV on stdout).
    Metrics { a_dir: PathBuf, b_dir: PathBuf },
}

fn thread_count(flag: Option<usize>) -> Result<usize, Error> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("GAK_THREADS") {
        Ok(raw) => raw
            .parse()
            .map_err(|_| Error::validation(format!("GAK_THREADS must be an integer, got '{raw}'"))),
        Err(_) => Ok(0),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(res) = cli.resolution {
        cfg.resolution = res;
    }
    if cli.full_res {
        cfg.resolution = FULL_RESOLUTION;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;

    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Render { gaussians, assets, oracle } => {
            assets.apply(&mut cfg);
            if let Some(g) = gaussians {
                cfg.gaussians = Some(g.clone());
            }
            cfg.validate()?;
            commands::cmd_render(&cfg, *oracle)
        }
        Command::Plan { steps, rectify_count, t_split, eta, explain } => {
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            if let Some(k) = rectify_count {
                cfg.rectify_count = *k;
            }
            if let Some(t) = t_split {
                cfg.t_split = *t;
            }
            if let Some(e) = eta {
                cfg.eta = *e;
            }
            cfg.validate()?;
            commands::cmd_plan(&cfg, *explain)
        }
        Command::Fit { assets, iters, learning_rate, train_views } => {
            assets.apply(&mut cfg);
            if let Some(i) = iters {
                cfg.iters = *i;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = *lr;
            }
            if let Some(tv) = train_views {
                cfg.train_views = *tv;
            }
            cfg.validate()?;
            commands::cmd_fit(&cfg)
        }
        Command::Sample { assets, denoiser, amplitude } => {
            assets.apply(&mut cfg);
            if let Some(d) = denoiser {
                cfg.denoiser = d.clone();
            }
            if let Some(a) = amplitude {
                cfg.amplitude = *a;
            }
            cfg.validate()?;
            commands::cmd_sample(&cfg)
        }
        Command::Animate { assets, denoiser, amplitude, frames, t_resume, independent } => {
            assets.apply(&mut cfg);
            if let Some(d) = denoiser {
                cfg.denoiser = d.clone();
            }
            if let Some(a) = amplitude {
                cfg.amplitude = *a;
            }
            if let Some(f) = frames {
                cfg.frames = *f;
            }
            if let Some(t) = t_resume {
                cfg.t_resume = *t;
            }
            cfg.validate()?;
            commands::cmd_animate(&cfg, *independent)
        }
        Command::Metrics { a_dir, b_dir } => commands::cmd_metrics(a_dir, b_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            // Bad inputs and parameters are usage errors; failures past
            // validation (io mid-run) are runtime errors.
            match err {
                Error::Io { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
