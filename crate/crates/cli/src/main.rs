//! `vird`: dataset generation, training, evaluation, inference and
//! visualization from the command line.

mod overrides;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use vird_core::geometry::largest_divisor_at_most;
use vird_core::CoreError;
use vird_experiment::checkpoint::load_checkpoint;
use vird_experiment::data::{prepare, prepare_sample};
use vird_experiment::eval::{evaluate, write_report};
use vird_experiment::viz::{default_rows, emit_visualizations, pose_overlay, write_png};
use vird_experiment::{ExperimentError, GridSettings, TrainConfig};
use vird_synth::{generate_dataset, read_dataset, write_dataset, GenParams, SynthError};

#[derive(Parser)]
#[command(name = "vird", version, about = "Cross-view 3-DoF pose estimation on synthetic scenes")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// JSON generation parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        /// KEY=VALUE override of a generation parameter.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Train a model and write checkpoints and loss logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// KEY=VALUE override by dotted path, e.g. model.cepa.d_k=16.
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Disable a component: cepa, ce, recon-origin, recon-cross, regression.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (default: the checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Position grid, e.g. 20x20.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        ntheta: Option<usize>,
        /// Report the grid argmax without regression.
        #[arg(long)]
        no_refine: bool,
    },
    /// Estimate the pose of one ground panorama in one satellite image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sat: PathBuf,
        #[arg(long)]
        grd: PathBuf,
        /// Satellite resolution, metres per pixel.
        #[arg(long)]
        res: f64,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        ntheta: Option<usize>,
        /// Overlay image path.
        #[arg(long, default_value = "overlay.png")]
        overlay: PathBuf,
    },
    /// Attention, reconstruction and pose images for dataset samples.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample ids (default: the first `count`).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Shared-axis rows to draw.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        ntheta: Option<usize>,
    },
}

/// Failure classes with distinct exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn is_usage_core(e: &CoreError) -> bool {
    !matches!(e, CoreError::EmptyVolume | CoreError::IndexOutOfRange { .. })
}

fn classify(e: anyhow::Error) -> Failure {
    let usage = if let Some(x) = e.downcast_ref::<ExperimentError>() {
        match x {
            ExperimentError::Config(_) => true,
            ExperimentError::Core(c) => is_usage_core(c),
            ExperimentError::Synth(SynthError::Invalid(_)) => true,
            _ => false,
        }
    } else if let Some(s) = e.downcast_ref::<SynthError>() {
        matches!(s, SynthError::Invalid(_)) || matches!(s, SynthError::Core(c) if is_usage_core(c))
    } else if let Some(c) = e.downcast_ref::<CoreError>() {
        is_usage_core(c)
    } else {
        e.downcast_ref::<serde_json::Error>().is_some() || e.downcast_ref::<Usage>().is_some()
    };
    if usage {
        Failure::Usage(e)
    } else {
        Failure::Runtime(e)
    }
}

/// Marker for validation failures raised by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Seed from the flag, then the config, then `VIRD_SEED`, then 0.
fn pick_seed(flag: Option<u64>, from_config: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag.or(from_config) {
        return Ok(s);
    }
    match std::env::var("VIRD_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("VIRD_SEED='{v}' is not an integer"))),
        Err(_) => Ok(0),
    }
}

fn parse_grid(s: &str) -> anyhow::Result<usize> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("grid '{s}' is not GxG")))?;
    let (a, b): (usize, usize) = (
        a.trim().parse().map_err(|_| usage(format!("grid '{s}' is not GxG")))?,
        b.trim().parse().map_err(|_| usage(format!("grid '{s}' is not GxG")))?,
    );
    if a != b || a == 0 {
        return Err(usage(format!("grid '{s}' must be square with at least one position")));
    }
    Ok(a)
}

fn grid_settings(default: GridSettings, grid: Option<&str>, ntheta: Option<usize>) -> anyhow::Result<GridSettings> {
    let side = grid.map(parse_grid).transpose()?.unwrap_or(default.side);
    let n_theta = ntheta.unwrap_or(default.n_theta);
    if n_theta == 0 {
        return Err(usage("--ntheta must be >= 1"));
    }
    Ok(GridSettings { side, n_theta })
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match cli.command {
        Command::Generate {
            seed,
            count,
            out,
            params,
            sets,
        } => {
            let params: GenParams = overrides::resolve(params.as_deref(), &sets).map_err(|e| usage(format!("{e:#}")))?;
            let seed = pick_seed(seed, None)?;
            let ds = generate_dataset(seed, count, &params)?;
            write_dataset(&ds, &out)?;
            write_json(&out, "resolved_config.json", &params)?;
            println!("wrote {count} samples to {} (seed {seed})", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            mut sets,
            ablate,
            epochs,
            seed,
            lr,
            batch_size,
        } => {
            if let Some(e) = epochs {
                sets.push(format!("epochs={e}"));
            }
            if let Some(l) = lr {
                sets.push(format!("lr={l}"));
            }
            if let Some(b) = batch_size {
                sets.push(format!("batch_size={b}"));
            }
            let mut cfg: TrainConfig = overrides::resolve(config.as_deref(), &sets).map_err(|e| usage(format!("{e:#}")))?;
            for a in &ablate {
                for name in a.split(',') {
                    cfg.ablate.disable(name.trim())?;
                }
            }
            let seed_in_config =
                sets.iter().any(|s| s.starts_with("seed=")) || overrides::file_has_key(config.as_deref(), "seed")?;
            cfg.seed = pick_seed(seed, seed_in_config.then_some(cfg.seed))?;
            cfg.validate()?;
            write_json(&out, "resolved_config.json", &cfg)?;
            let ds = read_dataset(&data)?;
            log::info!("training on {} samples for {} epochs", ds.samples.len(), cfg.epochs);
            let outcome = vird_experiment::train(&cfg, &ds, &out)?;
            println!(
                "trained {} steps in {:.1}s; checkpoint in {}",
                outcome.history.len(),
                outcome.seconds,
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            grid,
            ntheta,
            no_refine,
        } => {
            let (model, manifest) = load_checkpoint(&checkpoint)?;
            let settings = grid_settings(manifest.config.test_grid, grid.as_deref(), ntheta)?;
            let snapped = largest_divisor_at_most(model.sat_cols(), settings.n_theta);
            println!("ntheta={snapped} (requested {})", settings.n_theta);
            let ds = read_dataset(&data)?;
            let samples = prepare(&model, &ds)?;
            let refine = !no_refine && !manifest.config.ablate.regression;
            let (report, timing) = evaluate(&model, &samples, settings, refine)?;
            let out = out.unwrap_or(checkpoint);
            write_report(&report, &timing, &out)?;
            let s = &report.summary;
            println!(
                "median_pos_m={:.4} median_orient_deg={:.4} mean_pos_m={:.4} mean_orient_deg={:.4}",
                s.median_position_m, s.median_orientation_deg, s.mean_position_m, s.mean_orientation_deg
            );
        }
        Command::Infer {
            checkpoint,
            sat,
            grd,
            res,
            grid,
            ntheta,
            overlay,
        } => {
            let (model, manifest) = load_checkpoint(&checkpoint)?;
            let load = |p: &Path| -> anyhow::Result<_> {
                Ok(image::open(p).with_context(|| format!("reading {}", p.display()))?.to_rgb8())
            };
            let (sat_img, grd_img) = (load(&sat)?, load(&grd)?);
            let cfg = &model.config;
            if sat_img.width() != sat_img.height() {
                bail!(usage(format!(
                    "satellite image must be square, got {}x{}",
                    sat_img.width(),
                    sat_img.height()
                )));
            }
            if sat_img.width() as usize != cfg.sat_size {
                bail!(usage(format!(
                    "satellite image is {} px wide, the model expects {}",
                    sat_img.width(),
                    cfg.sat_size
                )));
            }
            if (grd_img.height() as usize, grd_img.width() as usize) != (cfg.pano_height, cfg.pano_width) {
                bail!(usage(format!(
                    "panorama is {}x{}, the model expects {}x{}",
                    grd_img.width(),
                    grd_img.height(),
                    cfg.pano_width,
                    cfg.pano_height
                )));
            }
            if !(res > 0.0) || (res - cfg.sat_resolution).abs() > 1e-9 {
                bail!(usage(format!(
                    "--res {res} does not match the model's {} m/px",
                    cfg.sat_resolution
                )));
            }
            let settings = grid_settings(manifest.config.test_grid, grid.as_deref(), ntheta)?;
            let g = model.pose_grid(settings.side, settings.n_theta)?;
            if g.n_theta() != settings.n_theta {
                eprintln!("ntheta={} (requested {})", g.n_theta(), settings.n_theta);
            }
            let sat_t = vird_synth::render::from_rgb8(&sat_img);
            let grd_t = vird_synth::render::from_rgb8(&grd_img);
            let refine = !manifest.config.ablate.regression;
            let inf = model.infer(&sat_t, &grd_t, &g, refine)?;
            let p = inf.refined;
            println!(
                "x_m={:.6} y_m={:.6} theta_deg={:.6} score={:.6}",
                p.x(),
                p.y(),
                p.theta().to_degrees(),
                inf.score
            );
            let (img, size) = pose_overlay(&model, &sat_t, &[(p, [255, 0, 0])], 4);
            if let Some(dir) = overlay.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            write_png(&overlay, size, size, true, &img, &[])?;
        }
        Command::Visualize {
            checkpoint,
            data,
            out,
            ids,
            count,
            rows,
            grid,
            ntheta,
        } => {
            let (model, manifest) = load_checkpoint(&checkpoint)?;
            let settings = grid_settings(manifest.config.test_grid, grid.as_deref(), ntheta)?;
            let g = model.pose_grid(settings.side, settings.n_theta)?;
            let ds = read_dataset(&data)?;
            let chosen: Vec<_> = if ids.is_empty() {
                ds.samples.iter().take(count).collect()
            } else {
                ids.iter()
                    .map(|id| {
                        ds.samples
                            .iter()
                            .find(|s| &s.id == id)
                            .ok_or_else(|| usage(format!("no sample '{id}' in {}", data.display())))
                    })
                    .collect::<anyhow::Result<_>>()?
            };
            let rows = if rows.is_empty() { default_rows(model.cepa.h_q) } else { rows };
            let refine = !manifest.config.ablate.regression;
            for s in chosen {
                let sample = prepare_sample(&model, s)?;
                for path in emit_visualizations(&model, &sample, &g, refine, &rows, &out)? {
                    println!("{}", path.display());
                }
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
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match classify(e) {
            Failure::Usage(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
            Failure::Runtime(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(3)
            }
        },
    }
}
