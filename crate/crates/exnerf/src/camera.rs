//! Pinhole camera, ray generation, and ray-space sampling.
//!
//! Convention: right-handed, camera looks down `-z`, pixel centers at
//! `+0.5`. A pixel `(row, col)` maps to the camera-space direction
//! `((col+0.5-cx)/fx, -(row+0.5-cy)/fy, -1)` which is rotated to world and
//! normalized.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Pinhole camera with a rigid camera-to-world transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 rigid transform, camera to world.
    pub c2w: [[f64; 4]; 4],
}

/// Wire form: `{"width","height","fx","fy","cx","cy","c2w": 16 numbers row-major}`.
#[derive(Serialize, Deserialize)]
struct CameraWire {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    c2w: Vec<f64>,
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut flat = Vec::with_capacity(16);
        for row in &self.c2w {
            flat.extend_from_slice(row);
        }
        CameraWire {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            c2w: flat,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = CameraWire::deserialize(d)?;
        if w.c2w.len() != 16 {
            return Err(serde::de::Error::custom("c2w must hold 16 numbers"));
        }
        let mut c2w = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                c2w[i][j] = w.c2w[i * 4 + j];
            }
        }
        Ok(Camera {
            width: w.width,
            height: w.height,
            fx: w.fx,
            fy: w.fy,
            cx: w.cx,
            cy: w.cy,
            c2w,
        })
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        // rotation block orthonormality
        let r = &self.c2w;
        for i in 0..3 {
            for j in 0..3 {
                let mut d = 0.0;
                for k in 0..3 {
                    d += r[k][i] * r[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-6 {
                    return Err(invalid("camera rotation block is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.c2w;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// World-space unit direction through the center of pixel `(row, col)`.
    pub fn ray_direction(&self, row: usize, col: usize) -> Vec3 {
        let d = [
            (col as f64 + 0.5 - self.cx) / self.fx,
            -(row as f64 + 0.5 - self.cy) / self.fy,
            -1.0,
        ];
        normalize(self.rotate(d))
    }

    /// World-to-camera transform of a point (rigid inverse).
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.c2w;
        let t = sub(p, self.position());
        [
            r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2],
            r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2],
            r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2],
        ]
    }

    /// Projects a camera-space point with `z < 0` to continuous pixel
    /// coordinates `(u, v)` where `u` is along columns and `v` along rows;
    /// pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.
    pub fn project_camera_space(&self, p: Vec3) -> (f64, f64) {
        let inv_z = 1.0 / -p[2];
        (
            self.fx * p[0] * inv_z + self.cx,
            self.cy - self.fy * p[1] * inv_z,
        )
    }

    /// Camera at `eye` looking at `target` with the given up hint.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        focal: f64,
    ) -> Camera {
        let backward = normalize(sub(eye, target)); // camera +z
        let right = normalize(cross(up, backward));
        let true_up = cross(backward, right);
        let mut c2w = [[0.0; 4]; 4];
        for i in 0..3 {
            c2w[i][0] = right[i];
            c2w[i][1] = true_up[i];
            c2w[i][2] = backward[i];
            c2w[i][3] = eye[i];
        }
        c2w[3][3] = 1.0;
        Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            c2w,
        }
    }
}

/// One camera ray with its training annotations.
#[derive(Debug, Clone)]
pub struct RayData {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub pixel: (usize, usize),
    /// Supervision target, RGB in [0,1].
    pub target: [f64; 3],
    pub in_silhouette: bool,
}

/// Rays through the centers of the given `(row, col)` pixels. Targets start
/// black and the silhouette flag false; callers fill both.
pub fn generate_rays(
    camera: &Camera,
    pixels: &[(usize, usize)],
    t_near: f64,
    t_far: f64,
) -> Result<Vec<RayData>> {
    camera.validate()?;
    if !(0.0 < t_near && t_near < t_far) {
        return Err(invalid(format!("bad ray bounds [{t_near}, {t_far}]")));
    }
    let origin = camera.position();
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= camera.height || col >= camera.width {
                return Err(invalid(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    camera.width, camera.height
                )));
            }
            Ok(RayData {
                origin,
                dir: camera.ray_direction(row, col),
                t_near,
                t_far,
                pixel: (row, col),
                target: [0.0; 3],
                in_silhouette: false,
            })
        })
        .collect()
}

/// Stratified t-values over `[t_near, t_far]`: one sample per equal bin,
/// midpoints without jitter, uniform within each bin with jitter.
pub fn stratified_samples(
    t_near: f64,
    t_far: f64,
    n: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(invalid("need at least 2 samples per ray"));
    }
    let span = (t_far - t_near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let u = if jitter { rng.gen_range(0.0..1.0) } else { 0.5 };
            t_near + span * (i as f64 + u)
        })
        .collect())
}

/// Inverse-CDF samples from the piecewise-constant PDF over `bin_edges`
/// weighted by `weights` (`weights.len() + 1 == bin_edges.len()`). All-zero
/// weights fall back to the uniform density and set the flag. Output is
/// sorted ascending.
pub fn importance_samples(
    bin_edges: &[f64],
    weights: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, bool)> {
    if bin_edges.len() != weights.len() + 1 || weights.is_empty() {
        return Err(invalid("bin edge / weight count mismatch"));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(invalid("importance weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    let uniform_fallback = total <= 0.0;
    let w: Vec<f64> = if uniform_fallback {
        vec![1.0 / weights.len() as f64; weights.len()]
    } else {
        weights.iter().map(|x| x / total).collect()
    };
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for x in &w {
        acc += x;
        cdf.push(acc);
    }
    *cdf.last_mut().expect("nonempty") = 1.0;
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(0.0..1.0);
            // first bin whose upper cdf exceeds u
            let hi = cdf.partition_point(|c| *c <= u).min(w.len());
            let lo = hi - 1;
            let denom = cdf[hi] - cdf[lo];
            let frac = if denom > 0.0 { (u - cdf[lo]) / denom } else { 0.5 };
            bin_edges[lo] + frac * (bin_edges[hi] - bin_edges[lo])
        })
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    Ok((out, uniform_fallback))
}

/// Merge two ascending t-lists into one ascending list.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Counter-based stream keyed by (global seed, iteration, pixel/ray id) so
/// batches reproduce regardless of scheduling.
pub fn ray_rng(seed: u64, iteration: u64, pixel: u64) -> ChaCha8Rng {
    let k = splitmix64(seed ^ splitmix64(iteration ^ splitmix64(pixel)));
    ChaCha8Rng::seed_from_u64(k)
}
