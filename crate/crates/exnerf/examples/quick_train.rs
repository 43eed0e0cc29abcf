//! Train a tiny model for a few hundred iterations on a small dataset,
//! then report reconstruction quality on the training split.
//!
//! Usage: cargo run --release --example quick_train -- [ITERATIONS]

use exnerf::eval::{evaluate_train_frames, psnr_of_mse};
use exnerf::synth::{generate_dataset, Dataset, DatasetOptions, SceneConfig};
use exnerf::training::{train, TrainConfig, TrainState};

fn main() -> exnerf::Result<()> {
    let iterations: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(500);

    let dir = std::env::temp_dir().join("exnerf_quick_train");
    let cfg = SceneConfig::default();
    let opts = DatasetOptions {
        frames: 12,
        width: 32,
        height: 32,
        seed: 7,
        oracle_samples: 256,
    };
    generate_dataset(&cfg, &opts, &dir)?;
    let data = Dataset::load(&dir)?;

    let mut tc = TrainConfig::desk_scale();
    tc.iterations = iterations;
    tc.rays_per_batch = 64;
    let mut state = TrainState::new(tc, data.meta.frames.len())?;

    train(&mut state, &data, iterations, |rec| {
        if rec.iteration % 100 == 0 {
            println!(
                "iter {:5}  loss {:.5}  (coarse {:.5}  fine {:.5}  reg {:.5})  alpha {:.2}",
                rec.iteration, rec.loss, rec.loss_coarse, rec.loss_fine, rec.reg, rec.alpha
            );
        }
        Ok(())
    })?;

    let metrics = evaluate_train_frames(&state, &data)?;
    let mean_mse: f64 = metrics.iter().map(|m| m.mse).sum::<f64>() / metrics.len() as f64;
    println!(
        "after {iterations} iterations: mean train MSE {mean_mse:.5} ({:.2} dB)",
        psnr_of_mse(mean_mse)
    );
    let ckpt = dir.join("model.ckpt");
    state.save(&ckpt)?;
    println!("checkpoint saved to {}", ckpt.display());
    Ok(())
}
