//! Drive a trained model with a synthetic expression sweep: the first
//! expression coefficient ramps from -1 to 1 under a fixed novel camera.
//!
//! Usage: cargo run --release --example reanimate_sweep -- CHECKPOINT DATA_DIR [OUT_DIR]

use exnerf::eval::{reanimate, DriveEntry};
use exnerf::synth::Dataset;
use exnerf::training::TrainState;
use std::path::{Path, PathBuf};

fn main() -> exnerf::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: reanimate_sweep CHECKPOINT DATA_DIR [OUT_DIR]");
        std::process::exit(2);
    }
    let out: PathBuf = args.get(3).map(Into::into).unwrap_or_else(|| "sweep_out".into());

    let state = TrainState::load(Path::new(&args[1]))?;
    let data = Dataset::load(Path::new(&args[2]))?;

    // novel camera: halfway between the first two training viewpoints
    let camera = data.meta.scene.camera(1, 2 * data.meta.frames.len(), data.meta.width, data.meta.height);
    let steps = 12;
    let drive: Vec<DriveEntry> = (0..steps)
        .map(|i| {
            let mut beta = vec![0.0; exnerf::BETA_DIM];
            beta[0] = -1.0 + 2.0 * i as f64 / (steps - 1) as f64;
            DriveEntry {
                beta,
                camera: camera.clone(),
            }
        })
        .collect();

    let report = reanimate(&state, &data, &drive, &out)?;
    println!("wrote {} frames to {}", report.frames, out.display());
    for w in &report.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
