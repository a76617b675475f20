use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hyperreel::commands;
use hyperreel::serve::{self, ServerState};
use hyperreel_core::network::SizeVariant;
use hyperreel_core::render::SamplingFlags;
use hyperreel_core::synth::SyntheticSceneSpec;
use hyperreel_core::train::TrainConfig;

/// Train, render and serve 6-DoF video scenes.
#[derive(Parser)]
#[command(name = "hyperreel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    DiffuseStatic,
    MovingSphere,
    ViewDependentShift,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, value_enum, conflicts_with = "spec")]
        preset: Option<Preset>,
        /// Scene description as JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        resolution: u32,
        /// Frame count for the moving-sphere preset.
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model per video chunk.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration as JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSONL loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size_variant: Option<SizeVariant>,
        /// Primitive count (full size variant only).
        #[arg(long)]
        primitives: Option<usize>,
        #[arg(long)]
        batch_rays: Option<usize>,
        /// Ablation: sample exactly on the primitives.
        #[arg(long)]
        no_offsets: bool,
        /// Ablation: ignore predicted velocities.
        #[arg(long)]
        no_velocities: bool,
    },
    /// Render one view to a PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Camera as JSON (same fields as a manifest camera).
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        time: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on holdout views.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Holdout camera names; defaults to the manifest's list.
        #[arg(long, value_delimiter = ',')]
        holdout: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        chunk: usize,
        /// JSON report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve frames over HTTP and WebSocket.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HYPERREEL_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("HYPERREEL_THREADS={v} is not a number"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            preset,
            spec,
            resolution,
            frames,
            seed,
            out,
            force,
        } => {
            let spec = match (preset, spec) {
                (_, Some(path)) => commands::read_spec(&path)?,
                (Some(Preset::DiffuseStatic), None) => {
                    SyntheticSceneSpec::diffuse_static(resolution)
                }
                (Some(Preset::MovingSphere), None) => {
                    SyntheticSceneSpec::moving_sphere(resolution, frames)
                }
                (Some(Preset::ViewDependentShift), None) => {
                    SyntheticSceneSpec::view_dependent_shift(resolution)
                }
                (None, None) => bail!("pass --preset or --spec"),
            };
            let manifest = commands::synth(&spec, seed, &out, force)?;
            println!(
                "wrote {} images to {}",
                manifest.frames.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            log,
            iters,
            seed,
            size_variant,
            primitives,
            batch_rays,
            no_offsets,
            no_velocities,
        } => {
            let mut cfg = match config {
                Some(p) => commands::read_train_config(&p)?,
                None => TrainConfig::default(),
            };
            cfg.total_iters = iters.unwrap_or(cfg.total_iters);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.size_variant = size_variant.unwrap_or(cfg.size_variant);
            cfg.batch_rays = batch_rays.unwrap_or(cfg.batch_rays);
            if primitives.is_some() {
                if cfg.size_variant != SizeVariant::Full {
                    bail!("--primitives only applies to the full size variant");
                }
                cfg.n_primitives = primitives;
            }
            let dataset = commands::load_data(&data)?;
            let flags = SamplingFlags {
                offsets: !no_offsets,
                velocities: !no_velocities,
            };
            let summary = commands::train_dataset(&dataset, &cfg, flags, &out, log.as_deref())?;
            for (p, l2) in summary.checkpoints.iter().zip(&summary.final_l2) {
                println!("{} (final l2 {l2:.6})", p.display());
            }
        }
        Command::Render {
            checkpoint,
            camera,
            time,
            out,
        } => {
            let ckpt = commands::load_model(&checkpoint)?;
            let cam = commands::read_camera(&camera)?;
            commands::render_to_file(&ckpt, &cam, time, &out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            holdout,
            chunk,
            out,
        } => {
            let ckpt = commands::load_model(&checkpoint)?;
            let dataset = commands::load_data(&data)?;
            let cfg = ckpt.train.clone().unwrap_or_default();
            let report =
                commands::evaluate(&ckpt.model, &dataset, &cfg, chunk, holdout.as_deref())?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(&p, json + "\n")
                    .with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            eprintln!(
                "mean PSNR {:.2} dB, mean SSIM {:.4}",
                report.mean_psnr, report.mean_ssim
            );
        }
        Command::Serve { checkpoint, addr } => {
            let state = Arc::new(ServerState::new(commands::load_model(&checkpoint)?));
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(serve::run(state, addr))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
