//! Analytic test scene and dataset generation.
//!
//! The scene is a soft-shelled sphere ("head") whose radius and albedo are
//! modulated inside a solid-angle patch ("mouth") by the first few
//! expression coefficients, in front of an opaque background slab carrying a
//! smoothed checkerboard that shifts slightly from frame to frame. Every
//! quantity is closed-form, so ground-truth images come from high-resolution
//! quadrature rather than from any learned model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::camera::{dot, norm, sub, Camera, Vec3};
use crate::error::{invalid, Error, Result};
use crate::field::{composite, DepthMap, Image};
use crate::prior::{icosphere, rasterize_silhouette, SilhouetteMask, TriangleMesh};
use crate::BETA_DIM;

/// Number of leading expression coefficients the scene actually reads.
pub const ACTIVE_BETA: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub head_center: Vec3,
    pub head_radius: f64,
    /// Shell softness of the head boundary.
    pub shell_width: f64,
    pub head_density: f64,
    /// Direction of the expression-driven patch (normalized on use).
    pub patch_dir: Vec3,
    /// Patch inner/outer angular extent, radians.
    pub patch_inner: f64,
    pub patch_outer: f64,
    /// Radius offset per active expression coefficient.
    pub radius_gain: [f64; ACTIVE_BETA],
    /// Hard limit on the expression-driven radius offset.
    pub max_offset: f64,
    /// Color shift per active expression coefficient, rows = RGB.
    pub color_gain: [[f64; ACTIVE_BETA]; 3],
    pub max_color_shift: f64,
    /// Background slab: front plane z, thickness, density, edge softness.
    pub slab_z: f64,
    pub slab_thickness: f64,
    pub slab_density: f64,
    pub slab_edge: f64,
    /// Per-frame slab shift amplitude (zero at frame 0).
    pub jitter_amplitude: f64,
    /// Checkerboard cell size in world units and blend sharpness.
    pub checker_cell: f64,
    pub checker_smooth: f64,
    pub checker_a: Vec3,
    pub checker_b: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    /// Camera orbit: distance, height, azimuth half-angle (radians).
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub orbit_half_angle: f64,
    /// Focal length as a multiple of the image width, so the field of view
    /// is resolution-independent.
    pub focal_ratio: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            head_center: [0.0, 0.0, 0.0],
            head_radius: 0.35,
            shell_width: 0.015,
            head_density: 40.0,
            patch_dir: [0.0, -0.3, 1.0],
            patch_inner: 0.25,
            patch_outer: 0.45,
            radius_gain: [0.04, 0.03, -0.02, 0.015],
            max_offset: 0.08,
            color_gain: [
                [0.25, -0.10, 0.05, 0.00],
                [0.00, 0.20, -0.10, 0.05],
                [-0.15, 0.05, 0.20, -0.10],
            ],
            max_color_shift: 0.35,
            slab_z: -1.2,
            slab_thickness: 0.3,
            slab_density: 200.0,
            slab_edge: 0.01,
            jitter_amplitude: 0.1,
            checker_cell: 0.4,
            checker_smooth: 0.15,
            checker_a: [0.90, 0.85, 0.80],
            checker_b: [0.15, 0.20, 0.30],
            t_near: 0.8,
            t_far: 4.5,
            orbit_radius: 2.2,
            orbit_height: 0.15,
            orbit_half_angle: 0.61,
            focal_ratio: 1.1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl SceneConfig {
    /// Radius beyond which head density is exactly zero.
    pub fn cutoff_radius(&self) -> f64 {
        self.head_radius + self.max_offset + 8.0 * self.shell_width
    }

    /// Deterministic background shift for a frame; zero at frame 0.
    pub fn jitter(&self, frame: usize) -> f64 {
        self.jitter_amplitude * (frame as f64 * 1.7).sin()
    }

    /// Patch profile in [0, 1] from the unit offset direction of a point.
    fn patch_profile(&self, unit: Vec3) -> f64 {
        let d = crate::camera::normalize(self.patch_dir);
        let u = dot(unit, d);
        let (ci, co) = (self.patch_inner.cos(), self.patch_outer.cos());
        smoothstep((u - co) / (ci - co))
    }

    /// Density and color at `x` for expression `beta` and slab shift
    /// `jitter`. Color is view-independent.
    pub fn eval(&self, x: Vec3, beta: &[f64], jitter: f64) -> (f64, Vec3) {
        let off = sub(x, self.head_center);
        let r = norm(off);
        let mut sigma = 0.0;
        let mut color = [0.0; 3];
        if r < self.cutoff_radius() && r > 0.0 {
            let unit = crate::camera::scale(off, 1.0 / r);
            let p = self.patch_profile(unit);
            let mut dr = 0.0;
            for (g, b) in self.radius_gain.iter().zip(beta) {
                dr += g * b;
            }
            let r_eff = self.head_radius + p * dr.clamp(-self.max_offset, self.max_offset);
            let s_head = self.head_density * sigmoid((r_eff - r) / self.shell_width);
            let base = [
                0.55 + 0.25 * (3.0 * x[0]).sin(),
                0.45 + 0.25 * (3.0 * x[1] + 1.0).sin(),
                0.50 + 0.25 * (3.0 * x[2] + 2.0).sin(),
            ];
            let mut head_color = base;
            for c in 0..3 {
                let mut shift = 0.0;
                for (g, b) in self.color_gain[c].iter().zip(beta) {
                    shift += g * b;
                }
                head_color[c] = (base[c]
                    + p * shift.clamp(-self.max_color_shift, self.max_color_shift))
                .clamp(0.0, 1.0);
            }
            sigma += s_head;
            for c in 0..3 {
                color[c] += s_head * head_color[c];
            }
        }
        // background slab, constant along z inside, smoothed checker in
        // x/y; exactly zero outside the softened edges
        let z0 = self.slab_z + jitter;
        let margin = 8.0 * self.slab_edge;
        let s_slab = if x[2] < z0 + margin && x[2] > z0 - self.slab_thickness - margin {
            self.slab_density
                * sigmoid((z0 - x[2]) / self.slab_edge)
                * sigmoid((x[2] - (z0 - self.slab_thickness)) / self.slab_edge)
        } else {
            0.0
        };
        if s_slab > 0.0 {
            let tau = std::f64::consts::TAU;
            let m = 0.5
                + 0.5
                    * ((tau * x[0] / self.checker_cell).sin()
                        * (tau * x[1] / self.checker_cell).sin()
                        / self.checker_smooth)
                        .tanh();
            sigma += s_slab;
            for c in 0..3 {
                color[c] += s_slab * (m * self.checker_a[c] + (1.0 - m) * self.checker_b[c]);
            }
        }
        if sigma > 0.0 {
            for c in &mut color {
                *c /= sigma;
            }
        }
        (sigma, color)
    }

    /// Camera for a frame on the orbit arc, looking at the head center.
    pub fn camera(&self, frame: usize, frames: usize, width: usize, height: usize) -> Camera {
        let a = if frames > 1 {
            -self.orbit_half_angle
                + 2.0 * self.orbit_half_angle * frame as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        let eye = [
            self.orbit_radius * a.sin(),
            self.orbit_height,
            self.orbit_radius * a.cos(),
        ];
        Camera::look_at(
            eye,
            self.head_center,
            [0.0, 1.0, 0.0],
            width,
            height,
            self.focal_ratio * width as f64,
        )
    }

    /// Silhouette proxy mesh: icosphere comfortably containing every point
    /// of nonzero head density.
    pub fn proxy_mesh(&self) -> TriangleMesh {
        icosphere(self.head_center, self.cutoff_radius() * 1.05, 3)
    }
}

/// Quadrature ground truth for one pixel: midpoint samples, f64, black
/// background.
pub fn oracle_pixel(
    cfg: &SceneConfig,
    origin: Vec3,
    dir: Vec3,
    beta: &[f64],
    jitter: f64,
    n_samples: usize,
) -> (Vec3, f64) {
    let span = (cfg.t_far - cfg.t_near) / n_samples as f64;
    let ts: Vec<f64> = (0..n_samples)
        .map(|i| cfg.t_near + span * (i as f64 + 0.5))
        .collect();
    let mut sigmas = Vec::with_capacity(n_samples);
    let mut rgbs = Vec::with_capacity(n_samples);
    for &t in &ts {
        let x = crate::camera::add(origin, crate::camera::scale(dir, t));
        let (s, c) = cfg.eval(x, beta, jitter);
        sigmas.push(s);
        rgbs.push(c);
    }
    let out = composite(&ts, cfg.t_far, &sigmas, &rgbs, [0.0; 3]).expect("sorted midpoints");
    (out.color, out.depth)
}

/// Full-frame ground-truth render.
pub fn oracle_render(
    cfg: &SceneConfig,
    camera: &Camera,
    beta: &[f64],
    jitter: f64,
    n_samples: usize,
) -> (Image, DepthMap) {
    let origin = camera.position();
    let pixels: Vec<(Vec3, f64)> = (0..camera.width * camera.height)
        .into_par_iter()
        .map(|pix| {
            let (row, col) = (pix / camera.width, pix % camera.width);
            oracle_pixel(cfg, origin, camera.ray_direction(row, col), beta, jitter, n_samples)
        })
        .collect();
    let mut image = Image::new(camera.width, camera.height);
    let mut depth = DepthMap::new(camera.width, camera.height);
    for (i, (c, d)) in pixels.into_iter().enumerate() {
        image.pixels[i] = [c[0] as f32, c[1] as f32, c[2] as f32];
        depth.values[i] = d as f32;
    }
    (image, depth)
}

// ---------------------------------------------------------------------------
// Dataset layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub camera: Camera,
    pub beta: Vec<f64>,
    pub jitter: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub width: usize,
    pub height: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub seed: u64,
    pub scene: SceneConfig,
    pub frames: Vec<FrameMeta>,
}

/// Every 8th frame is held out, offset so frame 0 stays in training.
pub fn split_for(index: usize) -> Split {
    if index % 8 == 4 {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetOptions {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub oracle_samples: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            frames: 60,
            width: 64,
            height: 64,
            seed: 7,
            oracle_samples: 512,
        }
    }
}

/// Generate a full dataset directory: `meta.json`, `images/frame_%04d.png`,
/// `masks/frame_%04d.png`, `mesh.obj`. Frame 0 gets the neutral expression
/// and zero slab shift.
pub fn generate_dataset(cfg: &SceneConfig, opts: &DatasetOptions, out: &Path) -> Result<DatasetMeta> {
    if opts.frames == 0 {
        return Err(invalid("dataset needs at least one frame"));
    }
    let images_dir = out.join("images");
    let masks_dir = out.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mesh = cfg.proxy_mesh();
    mesh.save_obj(&out.join("mesh.obj"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut frames = Vec::with_capacity(opts.frames);
    for i in 0..opts.frames {
        let beta: Vec<f64> = if i == 0 {
            vec![0.0; BETA_DIM]
        } else {
            (0..BETA_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let camera = cfg.camera(i, opts.frames, opts.width, opts.height);
        let jitter = cfg.jitter(i);
        let (image, _depth) = oracle_render(cfg, &camera, &beta, jitter, opts.oracle_samples);
        let mask = rasterize_silhouette(&mesh, &camera)?;
        let image_name = format!("images/frame_{i:04}.png");
        let mask_name = format!("masks/frame_{i:04}.png");
        image.save_png(&out.join(&image_name))?;
        mask.save_png(&out.join(&mask_name))?;
        frames.push(FrameMeta {
            index: i,
            image: image_name,
            mask: mask_name,
            camera,
            beta,
            jitter,
            split: split_for(i),
        });
    }
    let meta = DatasetMeta {
        width: opts.width,
        height: opts.height,
        t_near: cfg.t_near,
        t_far: cfg.t_far,
        seed: opts.seed,
        scene: cfg.clone(),
        frames,
    };
    let meta_path = out.join("meta.json");
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta)
}

/// A dataset loaded back into memory.
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub images: Vec<Image>,
    pub masks: Vec<SilhouetteMask>,
    pub mesh: TriangleMesh,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let meta_path = root.join("meta.json");
        let bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_slice(&bytes)?;
        let mut images = Vec::with_capacity(meta.frames.len());
        let mut masks = Vec::with_capacity(meta.frames.len());
        for f in &meta.frames {
            if f.beta.len() != BETA_DIM {
                return Err(invalid(format!(
                    "frame {}: expected {BETA_DIM} expression coefficients, got {}",
                    f.index,
                    f.beta.len()
                )));
            }
            let img = Image::load_png(&root.join(&f.image))?;
            if img.width != meta.width || img.height != meta.height {
                return Err(invalid(format!("frame {}: image size mismatch", f.index)));
            }
            let mask = SilhouetteMask::load_png(&root.join(&f.mask))?;
            if mask.width != meta.width || mask.height != meta.height {
                return Err(invalid(format!("frame {}: mask size mismatch", f.index)));
            }
            images.push(img);
            masks.push(mask);
        }
        let mesh = TriangleMesh::load_obj(&root.join("mesh.obj"))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            meta,
            images,
            masks,
            mesh,
        })
    }

    pub fn train_frames(&self) -> Vec<usize> {
        self.meta
            .frames
            .iter()
            .filter(|f| f.split == Split::Train)
            .map(|f| f.index)
            .collect()
    }

    pub fn val_frames(&self) -> Vec<usize> {
        self.meta
            .frames
            .iter()
            .filter(|f| f.split == Split::Val)
            .map(|f| f.index)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::sample_mesh_points;

    #[test]
    fn jitter_is_zero_at_frame_zero() {
        let cfg = SceneConfig::default();
        assert_eq!(cfg.jitter(0), 0.0);
        assert!(cfg.jitter(1).abs() > 0.0);
    }

    #[test]
    fn neutral_expression_matches_zero_gains() {
        let cfg = SceneConfig::default();
        let beta = vec![0.0; BETA_DIM];
        // a point in the patch direction on the shell
        let x = [0.0, -0.10, 0.33];
        let (s, c) = cfg.eval(x, &beta, 0.0);
        let mut no_patch = cfg.clone();
        no_patch.radius_gain = [0.0; ACTIVE_BETA];
        no_patch.color_gain = [[0.0; ACTIVE_BETA]; 3];
        let beta2: Vec<f64> = (0..BETA_DIM).map(|i| (i as f64 * 0.37).sin()).collect();
        let (s2, c2) = no_patch.eval(x, &beta2, 0.0);
        assert_eq!(s, s2);
        assert_eq!(c, c2);
    }

    #[test]
    fn head_density_vanishes_beyond_cutoff() {
        let cfg = SceneConfig::default();
        let beta = vec![1.0; BETA_DIM];
        let r = cfg.cutoff_radius() + 1e-9;
        let (s, _) = cfg.eval([0.0, 0.0, r], &beta, 0.0);
        assert_eq!(s, 0.0, "outside cutoff but in front of the slab");
    }

    #[test]
    fn inactive_expression_components_do_nothing() {
        let cfg = SceneConfig::default();
        let mut a = vec![0.0; BETA_DIM];
        let mut b = vec![0.0; BETA_DIM];
        a[0] = 0.5;
        b[0] = 0.5;
        for i in ACTIVE_BETA..BETA_DIM {
            b[i] = ((i * 31) % 17) as f64 / 17.0 - 0.5;
        }
        let x = [0.0, -0.10, 0.33];
        assert_eq!(cfg.eval(x, &a, 0.0), cfg.eval(x, &b, 0.0));
    }

    #[test]
    fn oracle_quadrature_converges() {
        let cfg = SceneConfig::default();
        let cam = cfg.camera(0, 1, 32, 32);
        let beta: Vec<f64> = (0..BETA_DIM).map(|i| if i < 4 { 0.6 } else { 0.0 }).collect();
        let (lo, _) = oracle_render(&cfg, &cam, &beta, cfg.jitter(3), 512);
        let (hi, _) = oracle_render(&cfg, &cam, &beta, cfg.jitter(3), 1024);
        let mut max_diff = 0.0f32;
        for (a, b) in lo.pixels.iter().zip(&hi.pixels) {
            for c in 0..3 {
                max_diff = max_diff.max((a[c] - b[c]).abs());
            }
        }
        assert!(
            max_diff <= 1.0 / 255.0,
            "512 vs 1024 samples differ by {max_diff} (> 1/255)"
        );
    }

    #[test]
    fn pixels_outside_mask_ignore_expression() {
        let cfg = SceneConfig::default();
        let cam = cfg.camera(2, 5, 48, 48);
        let mask = rasterize_silhouette(&cfg.proxy_mesh(), &cam).unwrap();
        let mut b1 = vec![0.0; BETA_DIM];
        let mut b2 = vec![0.0; BETA_DIM];
        for i in 0..ACTIVE_BETA {
            b1[i] = 0.9;
            b2[i] = -0.9;
        }
        let (i1, _) = oracle_render(&cfg, &cam, &b1, 0.0, 128);
        let (i2, _) = oracle_render(&cfg, &cam, &b2, 0.0, 128);
        let mut outside = 0;
        for row in 0..48 {
            for col in 0..48 {
                if !mask.get(row, col) {
                    outside += 1;
                    assert_eq!(i1.get(row, col), i2.get(row, col), "pixel ({row},{col})");
                }
            }
        }
        assert!(outside > 200, "mask covers almost everything ({outside} outside)");
    }

    #[test]
    fn proxy_mesh_silhouette_covers_head_surface() {
        let cfg = SceneConfig::default();
        // sample points just inside the density cutoff and check their
        // projections land inside the rasterized silhouette
        let shell = icosphere(cfg.head_center, cfg.cutoff_radius() * 0.999, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sample_mesh_points(&shell, 10_000, &mut rng);
        for frame in [0usize, 2, 4] {
            let cam = cfg.camera(frame, 5, 64, 64);
            let mask = rasterize_silhouette(&cfg.proxy_mesh(), &cam).unwrap();
            for p in &pts {
                let pc = cam.world_to_camera(*p);
                let (u, v) = cam.project_camera_space(pc);
                let (col, row) = (u.floor() as i64, v.floor() as i64);
                assert!(
                    col >= 0 && row >= 0 && (col as usize) < 64 && (row as usize) < 64,
                    "surface point projects off-screen"
                );
                assert!(
                    mask.get(row as usize, col as usize),
                    "surface point at pixel ({row},{col}) outside silhouette"
                );
            }
        }
    }

    #[test]
    fn dataset_roundtrip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let opts = DatasetOptions {
            frames: 10,
            width: 16,
            height: 16,
            seed: 11,
            oracle_samples: 64,
        };
        let meta = generate_dataset(&cfg, &opts, dir.path()).unwrap();
        assert_eq!(meta.frames.len(), 10);
        assert_eq!(meta.frames[0].beta, vec![0.0; BETA_DIM]);
        assert_eq!(meta.frames[0].jitter, 0.0);
        assert_eq!(meta.frames[4].split, Split::Val);
        assert_eq!(meta.frames[0].split, Split::Train);
        assert_eq!(meta.frames[12 % 10].split, Split::Train);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.images.len(), 10);
        assert_eq!(ds.val_frames(), vec![4]);
        assert_eq!(ds.train_frames().len(), 9);
        assert!(ds.mesh.triangles.len() > 100);
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let opts = DatasetOptions {
            frames: 3,
            width: 12,
            height: 12,
            seed: 5,
            oracle_samples: 32,
        };
        let m1 = generate_dataset(&cfg, &opts, d1.path()).unwrap();
        let m2 = generate_dataset(&cfg, &opts, d2.path()).unwrap();
        for (a, b) in m1.frames.iter().zip(&m2.frames) {
            assert_eq!(a.beta, b.beta);
        }
        let b1 = std::fs::read(d1.path().join("images/frame_0002.png")).unwrap();
        let b2 = std::fs::read(d2.path().join("images/frame_0002.png")).unwrap();
        assert_eq!(b1, b2);
    }
}
