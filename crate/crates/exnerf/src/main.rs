//! Command-line front end: dataset generation, training, rendering,
//! evaluation, driven reanimation, and the background-leakage ablation.

use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::PathBuf;

use exnerf::error::{Error, Result};
use exnerf::eval::{
    evaluate_train_frames, expression_swap, load_drive, psnr_of_mse, reanimate,
    render_dataset_frame, validate_frame,
};
use exnerf::synth::{generate_dataset, Dataset, DatasetOptions, SceneConfig};
use exnerf::training::{TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "exnerf", about = "Expression-conditioned deformable radiance fields", version)]
struct Cli {
    /// Base seed for dataset generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Deterministic execution. Results are already independent of thread
    /// count by construction; the flag is accepted for interface stability.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with analytic ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Quadrature samples per pixel for ground-truth rendering.
        #[arg(long, default_value_t = 512)]
        oracle_samples: usize,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training configuration JSON; defaults to the desk-scale preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from an existing checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Disable the silhouette gating of the expression vector.
        #[arg(long)]
        no_prior: bool,
        /// Metrics output, one JSON object per iteration.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Save a checkpoint every N iterations (the final state is always
        /// saved).
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Render one dataset frame from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a 16-bit depth PNG (with JSON sidecar) here.
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Reconstruction metrics on training frames and held-out fitting on
    /// validation frames.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optimization steps per validation frame.
        #[arg(long, default_value_t = 2000)]
        val_steps: u64,
        /// Full-frame evaluation cadence during validation fitting.
        #[arg(long, default_value_t = 100)]
        eval_every: u64,
        /// Skip the validation-frame fitting (train-split metrics only).
        #[arg(long)]
        skip_val: bool,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a driving sequence of (expression, camera) entries.
    Reanimate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON array of {beta: [...], camera: {...}}.
        #[arg(long)]
        drive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure expression leakage outside the silhouette by swapping the
    /// expression vector on one frame.
    AblateBackground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: usize,
        /// Scale applied to the frame's expression to produce the swapped
        /// one.
        #[arg(long, default_value_t = -1.0)]
        beta_scale: f64,
        /// Write the per-pixel difference image here.
        #[arg(long)]
        diff: Option<PathBuf>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit_report<T: serde::Serialize>(report: &T, out: Option<&PathBuf>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => std::fs::write(path, json).map_err(|e| Error::io(path, e))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth {
            out,
            frames,
            width,
            height,
            oracle_samples,
        } => {
            let cfg = SceneConfig::default();
            let opts = DatasetOptions {
                frames,
                width,
                height,
                seed: cli.seed.unwrap_or(7),
                oracle_samples,
            };
            let meta = generate_dataset(&cfg, &opts, &out)?;
            eprintln!(
                "wrote {} frames ({}x{}) to {}",
                meta.frames.len(),
                meta.width,
                meta.height,
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            config,
            resume,
            iterations,
            no_prior,
            metrics,
            checkpoint_every,
        } => {
            let dataset = Dataset::load(&data)?;
            let mut state = match resume {
                Some(path) => TrainState::load(&path)?,
                None => {
                    let mut cfg = match config {
                        Some(path) => {
                            let bytes =
                                std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                            serde_json::from_slice::<TrainConfig>(&bytes)?
                        }
                        None => TrainConfig::desk_scale(),
                    };
                    if let Some(seed) = cli.seed {
                        cfg.seed = seed;
                    }
                    if let Some(n) = iterations {
                        cfg.iterations = n;
                    }
                    if no_prior {
                        cfg.prior_enabled = false;
                    }
                    TrainState::new(cfg, dataset.meta.frames.len())?
                }
            };
            if let Some(n) = iterations {
                state.config.iterations = n;
            }
            let mut metrics_file = match &metrics {
                Some(path) => Some(std::io::BufWriter::new(
                    std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
                )),
                None => None,
            };
            let remaining = state.config.iterations.saturating_sub(state.iteration);
            let total = state.config.iterations;
            let out_path = out.clone();
            let mut last_save = state.iteration;
            // drive the loop manually so periodic checkpoints can borrow state
            for _ in 0..remaining {
                let rec = exnerf::training::train_step(&mut state, &dataset)?;
                if let Some(f) = metrics_file.as_mut() {
                    serde_json::to_writer(&mut *f, &rec)?;
                    writeln!(f).map_err(|e| Error::io(metrics.as_ref().unwrap(), e))?;
                }
                if rec.iteration % 1000 == 0 {
                    eprintln!(
                        "iter {}/{} loss {:.5} (coarse {:.5} fine {:.5} reg {:.5}) lr {:.2e}",
                        rec.iteration, total, rec.loss, rec.loss_coarse, rec.loss_fine,
                        rec.reg, rec.lr
                    );
                }
                if let Some(every) = checkpoint_every {
                    if state.iteration.wrapping_sub(last_save) >= every {
                        state.save(&out_path)?;
                        last_save = state.iteration;
                    }
                }
            }
            state.save(&out_path)?;
            eprintln!("saved {}", out_path.display());
        }
        Command::Render {
            checkpoint,
            data,
            frame,
            out,
            depth,
        } => {
            let state = TrainState::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let (img, depth_map) = render_dataset_frame(&state, &dataset, frame, None, None)?;
            img.save_png(&out)?;
            if let Some(dp) = depth {
                depth_map.save_png(&dp, dataset.meta.t_near, dataset.meta.t_far)?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            val_steps,
            eval_every,
            skip_val,
            out,
        } => {
            let state = TrainState::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let train_metrics = evaluate_train_frames(&state, &dataset)?;
            let mut val_reports = Vec::new();
            if !skip_val {
                for frame in dataset.val_frames() {
                    val_reports.push(validate_frame(
                        &state, &dataset, frame, val_steps, eval_every,
                    )?);
                }
            }
            let train_mse: f64 = train_metrics.iter().map(|m| m.mse).sum::<f64>()
                / train_metrics.len().max(1) as f64;
            let report = serde_json::json!({
                "iteration": state.iteration,
                "train_frames": train_metrics,
                "train_mean_mse": train_mse,
                "train_psnr_of_mean_mse": psnr_of_mse(train_mse),
                "validation": val_reports,
            });
            emit_report(&report, out.as_ref())?;
        }
        Command::Reanimate {
            checkpoint,
            data,
            drive,
            out,
            report,
        } => {
            let state = TrainState::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let entries = load_drive(&drive)?;
            let rep = reanimate(&state, &dataset, &entries, &out)?;
            emit_report(&rep, report.as_ref())?;
        }
        Command::AblateBackground {
            checkpoint,
            data,
            frame,
            beta_scale,
            diff,
            out,
        } => {
            let state = TrainState::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let fm = dataset
                .meta
                .frames
                .get(frame)
                .ok_or_else(|| Error::InvalidArgument(format!("frame {frame} out of range")))?;
            let swapped: Vec<f64> = fm.beta.iter().map(|b| b * beta_scale).collect();
            let rep = expression_swap(&state, &dataset, frame, &swapped, diff.as_deref())?;
            emit_report(&rep, out.as_ref())?;
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code() as u8)
        }
    }
}
