//! Generate a small synthetic dataset and print a summary.
//!
//! Usage: cargo run --example make_dataset -- [OUT_DIR]

use exnerf::synth::{generate_dataset, DatasetOptions, SceneConfig};

fn main() -> exnerf::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "dataset_out".into());
    let cfg = SceneConfig::default();
    let opts = DatasetOptions {
        frames: 20,
        width: 48,
        height: 48,
        seed: 7,
        oracle_samples: 256,
    };
    let meta = generate_dataset(&cfg, &opts, std::path::Path::new(&out))?;
    println!("wrote {} frames to {out}/", meta.frames.len());
    let val: Vec<usize> = meta
        .frames
        .iter()
        .filter(|f| f.split == exnerf::synth::Split::Val)
        .map(|f| f.index)
        .collect();
    println!("held-out frames: {val:?}");
    println!(
        "frame 1 expression (first 4 of {}): {:?}",
        exnerf::BETA_DIM,
        &meta.frames[1].beta[..4]
    );
    Ok(())
}
