//! Evaluation: image metrics, held-out frame fitting (optimize that frame's
//! deformation code while everything else stays frozen), driven reanimation
//! from expression sequences, and the expression-swap probe that measures
//! leakage outside the silhouette.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::camera::{ray_rng, Camera};
use crate::encoding::{ctf_weights, CtfSchedule};
use crate::error::{invalid, Error, Result};
use crate::field::{
    render_ray, render_ray_backward, Conditioning, DepthMap, Image, RenderSettings,
};
use crate::nn::{adam_step, AdamState};
use crate::prior::{rasterize_silhouette, SilhouetteMask};
use crate::synth::{Dataset, Split};
use crate::training::TrainState;
use crate::{APPEARANCE_CODE_DIM, BETA_DIM, DEFORM_CODE_DIM};

/// Mean squared error over all pixels and channels, and the corresponding
/// peak signal-to-noise ratio (`-10 log10(mse)`, infinite for identical
/// images).
pub fn mse_psnr(a: &Image, b: &Image) -> Result<(f64, f64)> {
    if a.width != b.width || a.height != b.height {
        return Err(invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut acc = 0.0f64;
    for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
        for c in 0..3 {
            let d = (pa[c] - pb[c]) as f64;
            acc += d * d;
        }
    }
    let mse = acc / (a.pixels.len() * 3) as f64;
    Ok((mse, psnr_of_mse(mse)))
}

pub fn psnr_of_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// FNV-1a over the little-endian bytes of a float slice; used to prove that
/// frozen parameters stayed untouched.
pub fn param_checksum(values: &[f32]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn frozen_checksum(state: &TrainState) -> u64 {
    // everything except the per-frame deformation codes
    let flat = state.params.flatten();
    let mut frozen = Vec::with_capacity(flat.len());
    for (name, _, range) in state.params.entries() {
        if name != "latents.deform" {
            frozen.extend_from_slice(&flat[range]);
        }
    }
    param_checksum(&frozen)
}

fn eval_settings(state: &TrainState) -> RenderSettings {
    RenderSettings {
        n_coarse: state.config.n_coarse,
        n_fine: state.config.n_fine,
        jitter: false,
        background: [0.0; 3],
    }
}

fn band_weights_at(state: &TrainState) -> Vec<f32> {
    let schedule = CtfSchedule {
        bands: state.config.model.deform_bands,
        horizon: state.config.horizon(),
    };
    ctf_weights(state.config.model.deform_bands, schedule.alpha(state.iteration))
        .into_iter()
        .map(|w| w as f32)
        .collect()
}

/// Render one dataset frame with the model, optionally overriding the
/// deformation code or the expression vector.
pub fn render_dataset_frame(
    state: &TrainState,
    data: &Dataset,
    frame: usize,
    omega_override: Option<&[f32]>,
    beta_override: Option<&[f64]>,
) -> Result<(Image, DepthMap)> {
    let fm = data
        .meta
        .frames
        .get(frame)
        .ok_or_else(|| invalid(format!("frame {frame} out of range")))?;
    let beta_src = beta_override.unwrap_or(&fm.beta);
    if beta_src.len() != BETA_DIM {
        return Err(invalid("expression vector has wrong length"));
    }
    let beta: Vec<f32> = beta_src.iter().map(|&b| b as f32).collect();
    let omega = omega_override
        .map(|o| o.to_vec())
        .unwrap_or_else(|| state.params.latents.lookup_deform(frame).to_vec());
    let phi = state.params.latents.lookup_appearance(frame).to_vec();
    let bw = band_weights_at(state);
    let mask = state.config.prior_enabled.then_some(&data.masks[frame]);
    crate::field::render_image(
        &state.params,
        &fm.camera,
        data.meta.t_near,
        data.meta.t_far,
        &omega,
        &phi,
        &beta,
        mask,
        Some(&bw),
        &eval_settings(state),
        state.config.seed,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub split: Split,
    pub mse: f64,
    pub psnr: f64,
}

/// Reconstruction metrics for training frames, using each frame's learned
/// codes as-is.
pub fn evaluate_train_frames(state: &TrainState, data: &Dataset) -> Result<Vec<FrameMetrics>> {
    let mut out = Vec::new();
    for f in &data.meta.frames {
        if f.split != Split::Train {
            continue;
        }
        let (img, _) = render_dataset_frame(state, data, f.index, None, None)?;
        let (mse, psnr) = mse_psnr(&img, &data.images[f.index])?;
        out.push(FrameMetrics {
            frame: f.index,
            split: Split::Train,
            mse,
            psnr,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub frame: usize,
    pub steps: u64,
    pub initial_mse: f64,
    pub best_mse: f64,
    pub best_step: u64,
    pub psnr: f64,
    /// Checksums over every parameter except the deformation codes; equal
    /// values prove nothing frozen moved.
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
}

const STREAM_VAL: u64 = u64::MAX - 3;

/// Fit a held-out frame: starting from frame 0's deformation code, optimize
/// only that code against the frame's pixels. Networks, other codes, and
/// the appearance code (frame 0's) stay frozen. Reports the best iterate
/// over periodic full-frame evaluations.
pub fn validate_frame(
    state: &TrainState,
    data: &Dataset,
    frame: usize,
    steps: u64,
    eval_every: u64,
) -> Result<ValidationReport> {
    let fm = data
        .meta
        .frames
        .get(frame)
        .ok_or_else(|| invalid(format!("frame {frame} out of range")))?;
    if fm.split != Split::Val {
        return Err(invalid(format!(
            "frame {frame} is a training frame; held-out fitting only applies to validation frames"
        )));
    }
    if eval_every == 0 {
        return Err(invalid("eval_every must be positive"));
    }
    let checksum_before = frozen_checksum(state);

    let cfg = &state.config;
    let mut omega: Vec<f32> = state.params.latents.lookup_deform(0).to_vec();
    let phi: Vec<f32> = state.params.latents.lookup_appearance(0).to_vec();
    let beta: Vec<f32> = fm.beta.iter().map(|&b| b as f32).collect();
    let beta_zero = vec![0.0f32; BETA_DIM];
    let mask = &data.masks[frame];
    let camera = &fm.camera;
    let target = &data.images[frame];
    let bw = band_weights_at(state);
    let settings = RenderSettings {
        jitter: true,
        ..eval_settings(state)
    };
    let names = vec![("validation.omega".to_string(), 0..DEFORM_CODE_DIM)];
    let mut adam = AdamState::new(DEFORM_CODE_DIM);
    let npix = camera.width * camera.height;
    let denom = (cfg.rays_per_batch * 3) as f32;

    let full_mse = |omega: &[f32]| -> Result<f64> {
        let (img, _) = render_dataset_frame(state, data, frame, Some(omega), None)?;
        Ok(mse_psnr(&img, target)?.0)
    };

    let initial_mse = full_mse(&omega)?;
    let mut best_mse = initial_mse;
    let mut best_step = 0u64;
    let mut grads_sink = state.params.zeros_like();
    let mut phi_sink = vec![0.0f32; APPEARANCE_CODE_DIM];

    for step in 0..steps {
        let mut step_rng = ray_rng(cfg.seed, step, STREAM_VAL);
        let mut omega_grad = vec![0.0f32; DEFORM_CODE_DIM];
        for _ in 0..cfg.rays_per_batch {
            let pix = step_rng.gen_range(0..npix);
            let (row, col) = (pix / camera.width, pix % camera.width);
            let inside = mask.get(row, col);
            let gated: &[f32] = if !cfg.prior_enabled || inside {
                &beta
            } else {
                &beta_zero
            };
            let cond = Conditioning {
                omega: &omega,
                phi: &phi,
                beta_gated: gated,
                band_weights: Some(&bw),
            };
            let mut rng = ray_rng(cfg.seed ^ 0x5eed, step, pix as u64);
            let fwd = render_ray(
                &state.params,
                camera.position(),
                camera.ray_direction(row, col),
                data.meta.t_near,
                data.meta.t_far,
                &cond,
                &settings,
                &mut rng,
            )?;
            let t = target.get(row, col);
            let mut dc = [0.0f32; 3];
            let mut df = [0.0f32; 3];
            for c in 0..3 {
                dc[c] = 2.0 * (fwd.coarse.color[c] - t[c]) / denom;
                df[c] = 2.0 * (fwd.fine.color[c] - t[c]) / denom;
            }
            render_ray_backward(
                &state.params,
                &fwd,
                settings.background,
                dc,
                df,
                &mut grads_sink,
                &mut omega_grad,
                &mut phi_sink,
            )?;
        }
        adam_step(&mut adam, &mut omega, &mut omega_grad, cfg.lr_start, &names)?;
        if (step + 1) % eval_every == 0 || step + 1 == steps {
            let mse = full_mse(&omega)?;
            if mse < best_mse {
                best_mse = mse;
                best_step = step + 1;
            }
        }
    }

    Ok(ValidationReport {
        frame,
        steps,
        initial_mse,
        best_mse,
        best_step,
        psnr: psnr_of_mse(best_mse),
        frozen_checksum_before: checksum_before,
        frozen_checksum_after: frozen_checksum(state),
    })
}

// ---------------------------------------------------------------------------
// Driven reanimation
// ---------------------------------------------------------------------------

/// One entry of a driving sequence: an expression vector and a camera.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriveEntry {
    pub beta: Vec<f64>,
    pub camera: Camera,
}

pub fn load_drive(path: &Path) -> Result<Vec<DriveEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<DriveEntry> = serde_json::from_slice(&bytes)?;
    for (i, e) in entries.iter().enumerate() {
        if e.beta.len() != BETA_DIM {
            return Err(invalid(format!(
                "drive entry {i}: expected {BETA_DIM} expression coefficients, got {}",
                e.beta.len()
            )));
        }
        e.camera.validate()?;
    }
    Ok(entries)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReanimateReport {
    pub frames: usize,
    /// Expression components outside the range seen in training.
    pub warnings: Vec<String>,
}

/// Render a driving sequence with frame 0's deformation and appearance
/// codes. Each entry gets a silhouette rasterized from the proxy mesh under
/// its own camera. Writes `frame_%04d.png` and `depth_%04d.png` (with JSON
/// sidecars) into `out_dir`.
pub fn reanimate(
    state: &TrainState,
    data: &Dataset,
    drive: &[DriveEntry],
    out_dir: &Path,
) -> Result<ReanimateReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    // per-component range observed in training, for extrapolation warnings
    let mut lo = [f64::INFINITY; BETA_DIM];
    let mut hi = [f64::NEG_INFINITY; BETA_DIM];
    for f in data.meta.frames.iter().filter(|f| f.split == Split::Train) {
        for (i, &b) in f.beta.iter().enumerate() {
            lo[i] = lo[i].min(b);
            hi[i] = hi[i].max(b);
        }
    }
    let omega = state.params.latents.lookup_deform(0).to_vec();
    let phi = state.params.latents.lookup_appearance(0).to_vec();
    let bw = band_weights_at(state);
    let settings = eval_settings(state);
    let mut warnings = Vec::new();
    for (i, entry) in drive.iter().enumerate() {
        if entry.beta.len() != BETA_DIM {
            return Err(invalid(format!("drive entry {i}: wrong expression length")));
        }
        for (c, &b) in entry.beta.iter().enumerate() {
            if b < lo[c] || b > hi[c] {
                warnings.push(format!(
                    "entry {i}: expression[{c}] = {b:.3} outside training range [{:.3}, {:.3}]",
                    lo[c], hi[c]
                ));
            }
        }
        let mask = rasterize_silhouette(&data.mesh, &entry.camera)?;
        let beta: Vec<f32> = entry.beta.iter().map(|&b| b as f32).collect();
        let (img, depth) = crate::field::render_image(
            &state.params,
            &entry.camera,
            data.meta.t_near,
            data.meta.t_far,
            &omega,
            &phi,
            &beta,
            state.config.prior_enabled.then_some(&mask),
            Some(&bw),
            &settings,
            state.config.seed,
        )?;
        img.save_png(&out_dir.join(format!("frame_{i:04}.png")))?;
        depth.save_png(
            &out_dir.join(format!("depth_{i:04}.png")),
            data.meta.t_near,
            data.meta.t_far,
        )?;
    }
    Ok(ReanimateReport {
        frames: drive.len(),
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Expression-swap probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapReport {
    pub frame: usize,
    /// Mean absolute pixel difference outside the silhouette between the
    /// frame's own expression and the swapped one.
    pub outside_mean_abs_diff: f64,
    pub outside_max_abs_diff: f64,
    pub outside_pixels: usize,
}

/// Render `frame` twice — with its own expression and with `beta_swap` —
/// and measure how much the pixels *outside* the frame's silhouette moved.
/// With silhouette gating the difference is exactly zero by construction;
/// without it, any nonzero value is expression leakage into the background.
pub fn expression_swap(
    state: &TrainState,
    data: &Dataset,
    frame: usize,
    beta_swap: &[f64],
    diff_png: Option<&Path>,
) -> Result<SwapReport> {
    if beta_swap.len() != BETA_DIM {
        return Err(invalid("swapped expression vector has wrong length"));
    }
    let mask = data
        .masks
        .get(frame)
        .ok_or_else(|| invalid(format!("frame {frame} out of range")))?;
    let (a, _) = render_dataset_frame(state, data, frame, None, None)?;
    let (b, _) = render_dataset_frame(state, data, frame, None, Some(beta_swap))?;
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    let mut outside = 0usize;
    let mut diff = Image::new(a.width, a.height);
    for row in 0..a.height {
        for col in 0..a.width {
            let pa = a.get(row, col);
            let pb = b.get(row, col);
            let d = (0..3).map(|c| (pa[c] - pb[c]).abs() as f64).fold(0.0, f64::max);
            diff.set(row, col, [d as f32; 3]);
            if !mask.get(row, col) {
                outside += 1;
                sum += d;
                max = max.max(d);
            }
        }
    }
    if outside == 0 {
        return Err(invalid("silhouette covers the whole frame; nothing to measure"));
    }
    if let Some(p) = diff_png {
        diff.save_png(p)?;
    }
    Ok(SwapReport {
        frame,
        outside_mean_abs_diff: sum / outside as f64,
        outside_max_abs_diff: max,
        outside_pixels: outside,
    })
}

/// Convenience: a set of mask dimensions must match the camera; reused by
/// the CLI for loading external masks.
pub fn check_mask(mask: &SilhouetteMask, camera: &Camera) -> Result<()> {
    if mask.width != camera.width || mask.height != camera.height {
        return Err(invalid(format!(
            "mask is {}x{} but camera is {}x{}",
            mask.width, mask.height, camera.width, camera.height
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetOptions, SceneConfig};
    use crate::training::{train_step, TrainConfig};

    fn tiny_setup(dir: &Path) -> (TrainState, Dataset) {
        let cfg = SceneConfig::default();
        let opts = DatasetOptions {
            frames: 6,
            width: 10,
            height: 10,
            seed: 3,
            oracle_samples: 48,
        };
        generate_dataset(&cfg, &opts, dir).unwrap();
        let data = Dataset::load(dir).unwrap();
        let tc = TrainConfig {
            iterations: 20,
            rays_per_batch: 6,
            reg_samples: 16,
            n_coarse: 6,
            n_fine: 4,
            seed: 2,
            model: crate::field::ModelSpec {
                trunk_width: 12,
                trunk_depth: 2,
                trunk_skip: Some(1),
                color_hidden: 8,
                deform_width: 8,
                deform_depth: 2,
                ..crate::field::ModelSpec::default()
            },
            ..TrainConfig::default()
        };
        let state = TrainState::new(tc, data.meta.frames.len()).unwrap();
        (state, data)
    }

    #[test]
    fn psnr_matches_hand_computed_values() {
        // -10 log10(mse) on two fixed mse values, to 0.01 dB
        assert!((psnr_of_mse(2.045e-3) - 26.89).abs() < 0.01);
        assert!((psnr_of_mse(1.255e-3) - 29.01).abs() < 0.01);
    }

    #[test]
    fn mse_of_constant_offset() {
        let mut a = Image::new(4, 4);
        let b = Image::new(4, 4);
        for p in &mut a.pixels {
            *p = [0.1, 0.1, 0.1];
        }
        let (mse, psnr) = mse_psnr(&a, &b).unwrap();
        assert!((mse - 0.01).abs() < 1e-9);
        assert!((psnr - 20.0).abs() < 1e-6);
    }

    #[test]
    fn identical_images_have_infinite_psnr() {
        let a = Image::new(3, 3);
        let (mse, psnr) = mse_psnr(&a, &a.clone()).unwrap();
        assert_eq!(mse, 0.0);
        assert!(psnr.is_infinite());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(mse_psnr(&Image::new(3, 3), &Image::new(4, 3)).is_err());
    }

    #[test]
    fn validate_rejects_training_frame() {
        let dir = tempfile::tempdir().unwrap();
        let (state, data) = tiny_setup(dir.path());
        let err = validate_frame(&state, &data, 0, 3, 1).unwrap_err();
        assert!(err.to_string().contains("training frame"), "{err}");
    }

    #[test]
    fn validate_leaves_frozen_parameters_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let (mut state, data) = tiny_setup(dir.path());
        for _ in 0..3 {
            train_step(&mut state, &data).unwrap();
        }
        let rep = validate_frame(&state, &data, 4, 4, 2).unwrap();
        assert_eq!(rep.frozen_checksum_before, rep.frozen_checksum_after);
        assert!(rep.best_mse <= rep.initial_mse);
    }

    #[test]
    fn gated_swap_has_zero_outside_difference() {
        let dir = tempfile::tempdir().unwrap();
        let (state, data) = tiny_setup(dir.path());
        let swap: Vec<f64> = data.meta.frames[1].beta.iter().map(|b| -b).collect();
        let rep = expression_swap(&state, &data, 1, &swap, None).unwrap();
        assert_eq!(rep.outside_mean_abs_diff, 0.0);
        assert_eq!(rep.outside_max_abs_diff, 0.0);
        assert!(rep.outside_pixels > 0);
    }

    #[test]
    fn reanimate_writes_frames_and_warns_on_extrapolation() {
        let dir = tempfile::tempdir().unwrap();
        let (state, data) = tiny_setup(dir.path());
        let out = dir.path().join("anim");
        let mut beta = vec![0.0; BETA_DIM];
        beta[0] = 5.0; // far outside anything sampled in training
        let drive = vec![
            DriveEntry {
                beta: data.meta.frames[1].beta.clone(),
                camera: data.meta.frames[1].camera.clone(),
            },
            DriveEntry {
                beta,
                camera: data.meta.frames[2].camera.clone(),
            },
        ];
        let rep = reanimate(&state, &data, &drive, &out).unwrap();
        assert_eq!(rep.frames, 2);
        assert!(rep.warnings.iter().any(|w| w.contains("entry 1")));
        assert!(out.join("frame_0000.png").exists());
        assert!(out.join("frame_0001.png").exists());
        assert!(out.join("depth_0001.json").exists());
    }

    #[test]
    fn drive_sequence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = tiny_setup(dir.path());
        let drive = vec![DriveEntry {
            beta: vec![0.25; BETA_DIM],
            camera: data.meta.frames[0].camera.clone(),
        }];
        let p = dir.path().join("drive.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&drive).unwrap()).unwrap();
        let back = load_drive(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].beta, drive[0].beta);
        // wrong length rejected
        let bad = vec![DriveEntry {
            beta: vec![0.0; 10],
            camera: data.meta.frames[0].camera.clone(),
        }];
        std::fs::write(&p, serde_json::to_vec(&bad).unwrap()).unwrap();
        assert!(load_drive(&p).is_err());
    }
}
