//! Load a checkpoint and render one dataset frame next to its ground truth.
//!
//! Usage: cargo run --release --example render_frame -- CHECKPOINT DATA_DIR [FRAME]
//!
//! (Produce inputs with the `quick_train` example or the `exnerf` binary.)

use exnerf::eval::{mse_psnr, render_dataset_frame};
use exnerf::synth::Dataset;
use exnerf::training::TrainState;
use std::path::Path;

fn main() -> exnerf::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: render_frame CHECKPOINT DATA_DIR [FRAME]");
        std::process::exit(2);
    }
    let frame: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let state = TrainState::load(Path::new(&args[1]))?;
    let data = Dataset::load(Path::new(&args[2]))?;
    let (img, depth) = render_dataset_frame(&state, &data, frame, None, None)?;
    let (mse, psnr) = mse_psnr(&img, &data.images[frame])?;
    println!("frame {frame}: MSE {mse:.5}, PSNR {psnr:.2} dB");

    img.save_png(Path::new("rendered.png"))?;
    depth.save_png(Path::new("rendered_depth.png"), data.meta.t_near, data.meta.t_far)?;
    data.images[frame].save_png(Path::new("ground_truth.png"))?;
    println!("wrote rendered.png, rendered_depth.png, ground_truth.png");
    Ok(())
}
