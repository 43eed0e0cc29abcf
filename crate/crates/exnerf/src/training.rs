//! Training loop: photometric loss on random rays of one frame per step,
//! plus a deformation regularizer that pins the warp to the identity on the
//! proxy surface. Gradients are reduced over fixed-size ray chunks in a
//! fixed order, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::camera::ray_rng;
use crate::encoding::CtfSchedule;
use crate::error::{invalid, Error, Result};
use crate::field::{
    deform_backward, deform_points, render_ray, render_ray_backward, Conditioning,
    FieldParameters, ModelSpec, RenderSettings,
};
use crate::nn::{
    adam_step, lr_schedule, read_checkpoint, write_checkpoint, AdamState, CheckpointEntry,
    CheckpointHeader,
};
use crate::prior::sample_mesh_points;
use crate::synth::Dataset;
use crate::{APPEARANCE_CODE_DIM, BETA_DIM, DEFORM_CODE_DIM};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub rays_per_batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Coarse-to-fine horizon for the deformation encoding; defaults to
    /// `min(50_000, iterations / 2)`.
    pub ctf_horizon: Option<u64>,
    /// Weight of the deformation regularizer.
    pub lambda_reg: f64,
    /// Fresh surface points per step for the regularizer.
    pub reg_samples: usize,
    pub seed: u64,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Gate the expression vector by the silhouette; off renders every ray
    /// with the full expression.
    pub prior_enabled: bool,
    pub model: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 50_000,
            rays_per_batch: 512,
            lr_start: 1e-3,
            lr_end: 5e-4,
            ctf_horizon: None,
            lambda_reg: 1.0,
            reg_samples: 1024,
            seed: 0,
            n_coarse: 64,
            n_fine: 64,
            prior_enabled: true,
            model: ModelSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced configuration that trains in minutes on a CPU.
    pub fn desk_scale() -> Self {
        TrainConfig {
            iterations: 20_000,
            rays_per_batch: 128,
            reg_samples: 256,
            n_coarse: 16,
            n_fine: 12,
            model: ModelSpec::desk_scale(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 || self.iterations == 0 {
            return Err(invalid("iterations and rays_per_batch must be positive"));
        }
        if self.n_coarse < 2 || self.n_fine == 0 {
            return Err(invalid("need at least 2 coarse and 1 fine samples"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if self.lambda_reg < 0.0 {
            return Err(invalid("lambda_reg must be non-negative"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> u64 {
        self.ctf_horizon
            .unwrap_or_else(|| 50_000.min(self.iterations / 2))
            .max(1)
    }
}

/// One metrics line, written as JSON per iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub loss: f64,
    pub loss_coarse: f64,
    pub loss_fine: f64,
    pub reg: f64,
    pub lr: f64,
    pub alpha: f64,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub params: FieldParameters<f32>,
    pub adam: AdamState,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, frames: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ray_rng(config.seed, u64::MAX, 0);
        let params = FieldParameters::init(config.model, frames, &mut rng)?;
        let n = params.param_count();
        Ok(TrainState {
            config,
            params,
            adam: AdamState::new(n),
            iteration: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self.params.entries();
        let flat = self.params.flatten();
        let header = CheckpointHeader {
            params: entries
                .iter()
                .map(|(name, shape, _)| CheckpointEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            iteration: self.iteration,
            optimizer_state: true,
            config: serde_json::to_value(&self.config)?,
        };
        let payloads: Vec<&[f32]> = entries.iter().map(|(_, _, r)| &flat[r.clone()]).collect();
        write_checkpoint(path, &header, &payloads, Some((&self.adam, self.iteration)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let config: TrainConfig = serde_json::from_value(ckpt.header.config.clone())?;
        config.validate()?;
        let frames = ckpt
            .header
            .params
            .iter()
            .find(|e| e.name == "latents.deform")
            .map(|e| e.shape[0])
            .ok_or_else(|| {
                Error::UnsupportedFormat("checkpoint lacks latent table".into())
            })?;
        let mut rng = ray_rng(config.seed, u64::MAX, 0);
        let mut params = FieldParameters::<f32>::init(config.model, frames, &mut rng)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .entries()
            .iter()
            .map(|(n, s, _)| (n.clone(), s.clone()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = ckpt
            .header
            .params
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone()))
            .collect();
        if expected != got {
            return Err(Error::UnsupportedFormat(
                "checkpoint tensors do not match the configured model".into(),
            ));
        }
        let flat: Vec<f32> = ckpt.payloads.into_iter().flatten().collect();
        params.load_flat(&flat)?;
        let adam = ckpt
            .adam
            .ok_or_else(|| Error::UnsupportedFormat("checkpoint lacks optimizer state".into()))?;
        Ok(TrainState {
            config,
            params,
            adam,
            iteration: ckpt.header.iteration,
        })
    }
}

/// Sentinel pixel index for RNG streams that are not tied to a pixel.
const STREAM_FRAME: u64 = u64::MAX - 1;
const STREAM_REG: u64 = u64::MAX - 2;

struct ChunkGrads {
    grads: FieldParameters<f32>,
    omega: Vec<f32>,
    phi: Vec<f32>,
    loss_coarse: f64,
    loss_fine: f64,
}

/// One optimization step. Deterministic given (config.seed, iteration) and
/// independent of the rayon thread count.
pub fn train_step(state: &mut TrainState, data: &Dataset) -> Result<MetricsRecord> {
    let cfg = &state.config;
    let iter = state.iteration;
    let train_frames: Vec<usize> = data
        .meta
        .frames
        .iter()
        .filter(|f| f.split == crate::synth::Split::Train)
        .map(|f| f.index)
        .collect();
    if train_frames.is_empty() {
        return Err(invalid("dataset has no training frames"));
    }

    let mut frame_rng = ray_rng(cfg.seed, iter, STREAM_FRAME);
    let frame = train_frames[frame_rng.gen_range(0..train_frames.len())];
    let fm = &data.meta.frames[frame];
    let image = &data.images[frame];
    let mask = &data.masks[frame];
    let camera = &fm.camera;
    let npix = camera.width * camera.height;
    let pixels: Vec<usize> = (0..cfg.rays_per_batch)
        .map(|_| frame_rng.gen_range(0..npix))
        .collect();

    let schedule = CtfSchedule {
        bands: cfg.model.deform_bands,
        horizon: cfg.horizon(),
    };
    let alpha = schedule.alpha(iter);
    let band_weights: Vec<f32> = crate::encoding::ctf_weights(cfg.model.deform_bands, alpha)
        .into_iter()
        .map(|w| w as f32)
        .collect();
    let settings = RenderSettings {
        n_coarse: cfg.n_coarse,
        n_fine: cfg.n_fine,
        jitter: true,
        background: [0.0; 3],
    };
    let beta: Vec<f32> = fm.beta.iter().map(|&b| b as f32).collect();
    let beta_zero = vec![0.0f32; BETA_DIM];
    let omega = state.params.latents.lookup_deform(frame).to_vec();
    let phi = state.params.latents.lookup_appearance(frame).to_vec();
    let nrays = cfg.rays_per_batch;
    let denom = (nrays * 3) as f32;

    const CHUNK: usize = 16;
    let params = &state.params;
    let chunk_results: Vec<Result<ChunkGrads>> = pixels
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut cg = ChunkGrads {
                grads: params.zeros_like(),
                omega: vec![0.0; DEFORM_CODE_DIM],
                phi: vec![0.0; APPEARANCE_CODE_DIM],
                loss_coarse: 0.0,
                loss_fine: 0.0,
            };
            for &pix in chunk {
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
                    band_weights: Some(&band_weights),
                };
                let mut rng = ray_rng(cfg.seed, iter, pix as u64);
                let fwd = render_ray(
                    params,
                    camera.position(),
                    camera.ray_direction(row, col),
                    data.meta.t_near,
                    data.meta.t_far,
                    &cond,
                    &settings,
                    &mut rng,
                )?;
                let target = image.get(row, col);
                let mut dc = [0.0f32; 3];
                let mut df = [0.0f32; 3];
                for c in 0..3 {
                    let rc = fwd.coarse.color[c] - target[c];
                    let rf = fwd.fine.color[c] - target[c];
                    cg.loss_coarse += (rc * rc) as f64;
                    cg.loss_fine += (rf * rf) as f64;
                    dc[c] = 2.0 * rc / denom;
                    df[c] = 2.0 * rf / denom;
                }
                render_ray_backward(
                    params,
                    &fwd,
                    settings.background,
                    dc,
                    df,
                    &mut cg.grads,
                    &mut cg.omega,
                    &mut cg.phi,
                )?;
            }
            Ok(cg)
        })
        .collect();

    let mut grads = params.zeros_like();
    let mut omega_grad = vec![0.0f32; DEFORM_CODE_DIM];
    let mut phi_grad = [0.0f32; APPEARANCE_CODE_DIM];
    let mut loss_coarse = 0.0;
    let mut loss_fine = 0.0;
    for cr in chunk_results {
        let cg = cr?;
        grads.add_assign(&cg.grads);
        for (a, b) in omega_grad.iter_mut().zip(&cg.omega) {
            *a += *b;
        }
        for (a, b) in phi_grad.iter_mut().zip(&cg.phi) {
            *a += *b;
        }
        loss_coarse += cg.loss_coarse;
        loss_fine += cg.loss_fine;
    }
    loss_coarse /= denom as f64;
    loss_fine /= denom as f64;

    // deformation regularizer: mean warp magnitude over fresh surface points
    let mut reg = 0.0;
    if cfg.lambda_reg > 0.0 && cfg.reg_samples > 0 {
        let mut reg_rng = ray_rng(cfg.seed, iter, STREAM_REG);
        let pts64 = sample_mesh_points(&data.mesh, cfg.reg_samples, &mut reg_rng);
        let pts: Vec<[f32; 3]> = pts64
            .iter()
            .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
            .collect();
        let (warped, tape) = deform_points(
            &state.params.deform,
            &cfg.model,
            &pts,
            &omega,
            Some(&band_weights),
        )?;
        let n = pts.len() as f32;
        let mut dwarped = Vec::with_capacity(pts.len());
        for (w, x) in warped.iter().zip(&pts) {
            let d = [w[0] - x[0], w[1] - x[1], w[2] - x[2]];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            reg += len as f64;
            if len > 1e-12 {
                let s = cfg.lambda_reg as f32 / (n * len);
                dwarped.push([d[0] * s, d[1] * s, d[2] * s]);
            } else {
                dwarped.push([0.0; 3]);
            }
        }
        reg /= n as f64;
        deform_backward(
            &state.params.deform,
            &cfg.model,
            &tape,
            &dwarped,
            &mut grads.deform,
            &mut omega_grad,
        )?;
    }

    let loss = loss_coarse + loss_fine + cfg.lambda_reg * reg;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss at iteration {iter}: coarse {loss_coarse}, fine {loss_fine}, reg {reg}"
        )));
    }

    // fold the latent-row gradients into the shared gradient structure
    {
        let base = frame * DEFORM_CODE_DIM;
        for (i, g) in omega_grad.iter().enumerate() {
            grads.latents.deform[base + i] += g;
        }
        let base = frame * APPEARANCE_CODE_DIM;
        for (i, g) in phi_grad.iter().enumerate() {
            grads.latents.appearance[base + i] += g;
        }
    }

    let lr = lr_schedule(cfg.lr_start, cfg.lr_end, iter, cfg.iterations);
    let mut flat_p = state.params.flatten();
    let mut flat_g = grads.flatten();
    let names: Vec<(String, std::ops::Range<usize>)> = state
        .params
        .entries()
        .into_iter()
        .map(|(n, _, r)| (n, r))
        .collect();
    adam_step(&mut state.adam, &mut flat_p, &mut flat_g, lr, &names)?;
    state.params.load_flat(&flat_p)?;
    state.iteration += 1;

    Ok(MetricsRecord {
        iteration: iter,
        loss,
        loss_coarse,
        loss_fine,
        reg,
        lr,
        alpha,
    })
}

/// Run `steps` iterations, invoking `on_step` after each (e.g. to append a
/// metrics line or save periodic checkpoints).
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    steps: u64,
    mut on_step: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<()> {
    for _ in 0..steps {
        let rec = train_step(state, data)?;
        on_step(&rec)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetOptions, SceneConfig};

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = SceneConfig::default();
        let opts = DatasetOptions {
            frames: 6,
            width: 12,
            height: 12,
            seed: 3,
            oracle_samples: 48,
        };
        generate_dataset(&cfg, &opts, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 40,
            rays_per_batch: 8,
            reg_samples: 32,
            n_coarse: 8,
            n_fine: 4,
            seed: 9,
            model: ModelSpec {
                pos_bands: 10,
                view_bands: 4,
                deform_bands: 6,
                trunk_width: 16,
                trunk_depth: 2,
                trunk_skip: Some(1),
                color_hidden: 8,
                deform_width: 8,
                deform_depth: 2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path());
        let mut cfg = tiny_config();
        cfg.iterations = 150;
        cfg.rays_per_batch = 24;
        let mut state = TrainState::new(cfg, data.meta.frames.len()).unwrap();
        let mut first = Vec::new();
        let mut last = Vec::new();
        for i in 0..150u64 {
            let rec = train_step(&mut state, &data).unwrap();
            if i < 15 {
                first.push(rec.loss_fine);
            }
            if i >= 135 {
                last.push(rec.loss_fine);
            }
        }
        let a: f64 = first.iter().sum::<f64>() / first.len() as f64;
        let b: f64 = last.iter().sum::<f64>() / last.len() as f64;
        assert!(b < a, "fine loss did not decrease: {a} -> {b}");
    }

    #[test]
    fn regularizer_is_zero_for_identity_warp() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path());
        let state = TrainState::new(tiny_config(), data.meta.frames.len()).unwrap();
        // output layer is zero-initialized, so the first step's reg term
        // must be exactly zero
        let mut s = state;
        let rec = train_step(&mut s, &data).unwrap();
        assert_eq!(rec.reg, 0.0);
    }

    #[test]
    fn step_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path());
        let mut s1 = TrainState::new(tiny_config(), data.meta.frames.len()).unwrap();
        let mut s2 = TrainState::new(tiny_config(), data.meta.frames.len()).unwrap();
        for _ in 0..5 {
            let r1 = train_step(&mut s1, &data).unwrap();
            let r2 = train_step(&mut s2, &data).unwrap();
            assert_eq!(r1.loss, r2.loss);
        }
        assert_eq!(s1.params.flatten(), s2.params.flatten());
    }

    #[test]
    fn checkpoint_continuation_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path());
        let mut reference = TrainState::new(tiny_config(), data.meta.frames.len()).unwrap();
        for _ in 0..6 {
            train_step(&mut reference, &data).unwrap();
        }
        let ckpt = dir.path().join("mid.ckpt");
        reference.save(&ckpt).unwrap();
        for _ in 0..4 {
            train_step(&mut reference, &data).unwrap();
        }
        let mut resumed = TrainState::load(&ckpt).unwrap();
        assert_eq!(resumed.iteration, 6);
        for _ in 0..4 {
            train_step(&mut resumed, &data).unwrap();
        }
        assert_eq!(reference.params.flatten(), resumed.params.flatten());
        assert_eq!(reference.adam.m, resumed.adam.m);
        assert_eq!(reference.adam.v, resumed.adam.v);
    }

    #[test]
    fn validation_frames_are_never_sampled() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path());
        let val: Vec<usize> = data.val_frames();
        assert_eq!(val, vec![4]);
        // the validation frame's codes must stay exactly at initialization
        let mut state = TrainState::new(tiny_config(), data.meta.frames.len()).unwrap();
        for _ in 0..30 {
            train_step(&mut state, &data).unwrap();
        }
        assert!(state
            .params
            .latents
            .lookup_deform(4)
            .iter()
            .all(|&v| v == 0.0));
        assert!(state
            .params
            .latents
            .lookup_appearance(4)
            .iter()
            .all(|&v| v == 0.0));
        // training-frame codes moved
        let moved = (0..data.meta.frames.len())
            .filter(|&f| f != 4)
            .any(|f| state.params.latents.lookup_deform(f).iter().any(|&v| v != 0.0));
        assert!(moved);
    }

    #[test]
    fn rejects_invalid_config() {
        let mut cfg = tiny_config();
        cfg.rays_per_batch = 0;
        assert!(TrainState::new(cfg, 4).is_err());
    }

    #[test]
    fn horizon_default_caps_at_half_run() {
        let mut cfg = TrainConfig {
            iterations: 40_000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.horizon(), 20_000);
        cfg.iterations = 200_000;
        assert_eq!(cfg.horizon(), 50_000);
        cfg.ctf_horizon = Some(123);
        assert_eq!(cfg.horizon(), 123);
    }
}
