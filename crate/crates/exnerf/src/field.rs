//! The expression-conditioned deformable radiance field and its renderer.
//!
//! A sample point is first warped to the canonical frame by the deformation
//! network (whose coordinate encoding carries the coarse-to-fine band
//! weights), then fed to the canonical field: the trunk takes the encoded
//! canonical position concatenated with the gated expression vector, the
//! density head reads softplus density off the trunk, and the color head
//! combines the trunk feature with the encoded view direction and the
//! per-frame appearance code. Rays are integrated with the standard
//! transmittance quadrature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{add, scale, Camera, Vec3};
use crate::encoding::{
    positional_encode_backward, positional_encode_into, EncodingSpec,
};
use crate::error::{invalid, Error, Result};
use crate::nn::{Activation, LatentTable, Mlp, MlpSpec, MlpTape};
use crate::prior::SilhouetteMask;
use crate::real::{r, Real};
use crate::{APPEARANCE_CODE_DIM, BETA_DIM, DEFORM_CODE_DIM};

/// Architecture hyperparameters for the whole field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelSpec {
    pub pos_bands: usize,
    pub view_bands: usize,
    pub deform_bands: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub trunk_skip: Option<usize>,
    pub color_hidden: usize,
    pub deform_width: usize,
    pub deform_depth: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            pos_bands: 10,
            view_bands: 4,
            deform_bands: 6,
            trunk_width: 256,
            trunk_depth: 8,
            trunk_skip: Some(5),
            color_hidden: 128,
            deform_width: 128,
            deform_depth: 6,
        }
    }
}

impl ModelSpec {
    /// A reduced configuration for CPU-scale experiments and tests.
    pub fn desk_scale() -> Self {
        ModelSpec {
            pos_bands: 10,
            view_bands: 4,
            deform_bands: 6,
            trunk_width: 32,
            trunk_depth: 4,
            trunk_skip: Some(2),
            color_hidden: 16,
            deform_width: 24,
            deform_depth: 3,
        }
    }

    pub fn pos_enc(&self) -> EncodingSpec {
        EncodingSpec { bands: self.pos_bands }
    }
    pub fn view_enc(&self) -> EncodingSpec {
        EncodingSpec { bands: self.view_bands }
    }
    pub fn deform_enc(&self) -> EncodingSpec {
        EncodingSpec { bands: self.deform_bands }
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.pos_enc().output_dim() + BETA_DIM
    }
    pub fn color_input_dim(&self) -> usize {
        self.trunk_width + self.view_enc().output_dim() + APPEARANCE_CODE_DIM
    }
    pub fn deform_input_dim(&self) -> usize {
        self.deform_enc().output_dim() + DEFORM_CODE_DIM
    }

    fn trunk_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.trunk_input_dim(),
            hidden_width: self.trunk_width,
            depth: self.trunk_depth,
            skip_layer: self.trunk_skip,
            output_dim: self.trunk_width,
            final_activation: Activation::None,
        }
    }
    fn sigma_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.trunk_width,
            hidden_width: 0,
            depth: 0,
            skip_layer: None,
            output_dim: 1,
            final_activation: Activation::Softplus,
        }
    }
    fn color_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.color_input_dim(),
            hidden_width: self.color_hidden,
            depth: 1,
            skip_layer: None,
            output_dim: 3,
            final_activation: Activation::Sigmoid,
        }
    }
    fn deform_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.deform_input_dim(),
            hidden_width: self.deform_width,
            depth: self.deform_depth,
            skip_layer: None,
            output_dim: 3,
            final_activation: Activation::None,
        }
    }
}

/// One canonical radiance net: trunk plus density and color heads. The
/// trunk output is ReLU-activated before both heads.
#[derive(Debug, Clone)]
pub struct FieldNet<R> {
    pub trunk: Mlp<R>,
    pub sigma_head: Mlp<R>,
    pub color_head: Mlp<R>,
}

impl<R: Real> FieldNet<R> {
    fn new(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        Ok(FieldNet {
            trunk: Mlp::new(spec.trunk_spec(), rng)?,
            sigma_head: Mlp::new(spec.sigma_spec(), rng)?,
            color_head: Mlp::new(spec.color_spec(), rng)?,
        })
    }

    fn zeros_like(&self) -> Self {
        FieldNet {
            trunk: self.trunk.zeros_like(),
            sigma_head: self.sigma_head.zeros_like(),
            color_head: self.color_head.zeros_like(),
        }
    }

    fn add_assign(&mut self, o: &Self) {
        self.trunk.add_assign(&o.trunk);
        self.sigma_head.add_assign(&o.sigma_head);
        self.color_head.add_assign(&o.color_head);
    }

    fn zero(&mut self) {
        self.trunk.zero();
        self.sigma_head.zero();
        self.color_head.zero();
    }
}

/// All trainable state. The same structure doubles as the gradient buffer.
#[derive(Debug, Clone)]
pub struct FieldParameters<R> {
    pub spec: ModelSpec,
    pub coarse: FieldNet<R>,
    pub fine: FieldNet<R>,
    /// Shared deformation net; final layer zero-initialized so the warp
    /// starts as the identity.
    pub deform: Mlp<R>,
    pub latents: LatentTable<R>,
}

impl<R: Real> FieldParameters<R> {
    pub fn init(spec: ModelSpec, frames: usize, rng: &mut impl Rng) -> Result<Self> {
        let coarse = FieldNet::new(&spec, rng)?;
        let fine = FieldNet::new(&spec, rng)?;
        let mut deform = Mlp::new(spec.deform_spec(), rng)?;
        deform.zero_output_layer();
        Ok(FieldParameters {
            spec,
            coarse,
            fine,
            deform,
            latents: LatentTable::new(frames, DEFORM_CODE_DIM, APPEARANCE_CODE_DIM),
        })
    }

    pub fn zeros_like(&self) -> Self {
        FieldParameters {
            spec: self.spec,
            coarse: self.coarse.zeros_like(),
            fine: self.fine.zeros_like(),
            deform: self.deform.zeros_like(),
            latents: self.latents.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, o: &Self) {
        self.coarse.add_assign(&o.coarse);
        self.fine.add_assign(&o.fine);
        self.deform.add_assign(&o.deform);
        self.latents.add_assign(&o.latents);
    }

    pub fn zero(&mut self) {
        self.coarse.zero();
        self.fine.zero();
        self.deform.zero();
        self.latents.zero();
    }

    /// Fixed flat ordering of every tensor: name, shape, flat range.
    pub fn entries(&self) -> Vec<(String, Vec<usize>, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0usize;
        let mut push = |name: String, shape: Vec<usize>, out: &mut Vec<_>| {
            let n: usize = shape.iter().product();
            out.push((name, shape, off..off + n));
            off += n;
        };
        for (net_name, net) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            for (part_name, mlp) in [
                ("trunk", &net.trunk),
                ("sigma", &net.sigma_head),
                ("color", &net.color_head),
            ] {
                for (i, l) in mlp.layers.iter().enumerate() {
                    push(
                        format!("{net_name}.{part_name}.l{i}.w"),
                        vec![l.out_dim, l.in_dim],
                        &mut out,
                    );
                    push(
                        format!("{net_name}.{part_name}.l{i}.b"),
                        vec![l.out_dim],
                        &mut out,
                    );
                }
            }
        }
        for (i, l) in self.deform.layers.iter().enumerate() {
            push(format!("deform.l{i}.w"), vec![l.out_dim, l.in_dim], &mut out);
            push(format!("deform.l{i}.b"), vec![l.out_dim], &mut out);
        }
        push(
            "latents.deform".into(),
            vec![self.latents.frames, self.latents.deform_dim],
            &mut out,
        );
        push(
            "latents.appearance".into(),
            vec![self.latents.frames, self.latents.appearance_dim],
            &mut out,
        );
        out
    }

    pub fn param_count(&self) -> usize {
        self.entries().last().map_or(0, |(_, _, r)| r.end)
    }

    fn visit_slices(&self) -> Vec<&[R]> {
        let mut out = Vec::new();
        for net in [&self.coarse, &self.fine] {
            for mlp in [&net.trunk, &net.sigma_head, &net.color_head] {
                for l in &mlp.layers {
                    out.push(l.w.as_slice());
                    out.push(l.b.as_slice());
                }
            }
        }
        for l in &self.deform.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out.push(self.latents.deform.as_slice());
        out.push(self.latents.appearance.as_slice());
        out
    }

    fn visit_slices_mut(&mut self) -> Vec<&mut [R]> {
        let mut out = Vec::new();
        for net in [&mut self.coarse, &mut self.fine] {
            for mlp in [&mut net.trunk, &mut net.sigma_head, &mut net.color_head] {
                for l in &mut mlp.layers {
                    out.push(l.w.as_mut_slice());
                    out.push(l.b.as_mut_slice());
                }
            }
        }
        for l in &mut self.deform.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.latents.deform.as_mut_slice());
        out.push(self.latents.appearance.as_mut_slice());
        out
    }

    pub fn flatten(&self) -> Vec<R> {
        let mut flat = Vec::with_capacity(self.param_count());
        for s in self.visit_slices() {
            flat.extend_from_slice(s);
        }
        flat
    }

    pub fn load_flat(&mut self, flat: &[R]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(invalid(format!(
                "flat parameter vector length {} != {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for s in self.visit_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Deformation pass
// ---------------------------------------------------------------------------

pub struct DeformTape<R> {
    n: usize,
    tape: MlpTape<R>,
}

/// Warp `xs` to the canonical frame: `x' = x + D(enc_ctf(x), omega)`.
/// `band_weights` are the coarse-to-fine weights for the coordinate
/// encoding; `None` means all bands active.
pub fn deform_points<R: Real>(
    deform: &Mlp<R>,
    spec: &ModelSpec,
    xs: &[[R; 3]],
    omega: &[R],
    band_weights: Option<&[R]>,
) -> Result<(Vec<[R; 3]>, DeformTape<R>)> {
    let n = xs.len();
    let enc = spec.deform_enc();
    let mut input = Vec::with_capacity(n * spec.deform_input_dim());
    for x in xs {
        positional_encode_into(x, enc, band_weights, &mut input)?;
        input.extend_from_slice(omega);
    }
    let (delta, tape) = deform.forward_batch(&input, n)?;
    let warped = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            [
                x[0] + delta[i * 3],
                x[1] + delta[i * 3 + 1],
                x[2] + delta[i * 3 + 2],
            ]
        })
        .collect();
    Ok((warped, DeformTape { n, tape }))
}

/// Reverse of `deform_points`: accumulates deformation-net gradients and the
/// gradient on `omega` (into `omega_grad`). `dwarped` is the gradient on the
/// warped points, which equals the gradient on the net's delta output.
pub fn deform_backward<R: Real>(
    deform: &Mlp<R>,
    spec: &ModelSpec,
    tape: &DeformTape<R>,
    dwarped: &[[R; 3]],
    grads: &mut Mlp<R>,
    omega_grad: &mut [R],
) -> Result<()> {
    let n = tape.n;
    debug_assert_eq!(dwarped.len(), n);
    let mut dout = Vec::with_capacity(n * 3);
    for g in dwarped {
        dout.extend_from_slice(g);
    }
    let dinput = deform.backward_batch(&tape.tape, &dout, grads)?;
    let enc_dim = spec.deform_enc().output_dim();
    let in_dim = spec.deform_input_dim();
    for row in 0..n {
        let seg = &dinput[row * in_dim + enc_dim..(row + 1) * in_dim];
        for (g, d) in omega_grad.iter_mut().zip(seg) {
            *g += *d;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Canonical field pass
// ---------------------------------------------------------------------------

pub struct FieldTape<R> {
    n: usize,
    trunk_tape: MlpTape<R>,
    sigma_tape: MlpTape<R>,
    color_tape: MlpTape<R>,
    /// Trunk output pre-ReLU sign information (post-ReLU values).
    feat: Vec<R>,
    warped: Vec<[R; 3]>,
}

pub struct FieldPassOutput<R> {
    pub sigmas: Vec<R>,
    pub rgbs: Vec<[R; 3]>,
}

/// Evaluate the canonical field on warped points. `beta_gated` must already
/// have passed through the expression gate.
pub fn field_pass<R: Real>(
    net: &FieldNet<R>,
    spec: &ModelSpec,
    warped: &[[R; 3]],
    view_dir: &[R; 3],
    phi: &[R],
    beta_gated: &[R],
) -> Result<(FieldPassOutput<R>, FieldTape<R>)> {
    if beta_gated.len() != BETA_DIM || phi.len() != APPEARANCE_CODE_DIM {
        return Err(invalid("conditioning vector dimensions"));
    }
    let n = warped.len();
    let pos_enc = spec.pos_enc();
    let mut trunk_in = Vec::with_capacity(n * spec.trunk_input_dim());
    for x in warped {
        positional_encode_into(x, pos_enc, None, &mut trunk_in)?;
        trunk_in.extend_from_slice(beta_gated);
    }
    let (trunk_raw, trunk_tape) = net.trunk.forward_batch(&trunk_in, n)?;
    // ReLU on the trunk feature before both heads
    let feat: Vec<R> = trunk_raw
        .iter()
        .map(|&v| if v > R::zero() { v } else { R::zero() })
        .collect();
    let (sig, sigma_tape) = net.sigma_head.forward_batch(&feat, n)?;
    let view_encoded = crate::encoding::positional_encode(view_dir, spec.view_enc(), None)?;
    let mut color_in = Vec::with_capacity(n * spec.color_input_dim());
    let w = spec.trunk_width;
    for row in 0..n {
        color_in.extend_from_slice(&feat[row * w..(row + 1) * w]);
        color_in.extend_from_slice(&view_encoded);
        color_in.extend_from_slice(phi);
    }
    let (rgb_flat, color_tape) = net.color_head.forward_batch(&color_in, n)?;
    let rgbs = (0..n)
        .map(|i| [rgb_flat[i * 3], rgb_flat[i * 3 + 1], rgb_flat[i * 3 + 2]])
        .collect();
    Ok((
        FieldPassOutput { sigmas: sig, rgbs },
        FieldTape {
            n,
            trunk_tape,
            sigma_tape,
            color_tape,
            feat,
            warped: warped.to_vec(),
        },
    ))
}

/// Reverse of `field_pass`. Accumulates net gradients and the appearance
/// code gradient, and returns the gradient on the warped points.
pub fn field_backward<R: Real>(
    net: &FieldNet<R>,
    spec: &ModelSpec,
    tape: &FieldTape<R>,
    dsigmas: &[R],
    drgbs: &[[R; 3]],
    grads: &mut FieldNet<R>,
    phi_grad: &mut [R],
) -> Result<Vec<[R; 3]>> {
    let n = tape.n;
    let w = spec.trunk_width;
    let mut drgb_flat = Vec::with_capacity(n * 3);
    for g in drgbs {
        drgb_flat.extend_from_slice(g);
    }
    let dcolor_in = net
        .color_head
        .backward_batch(&tape.color_tape, &drgb_flat, &mut grads.color_head)?;
    let dsig_in = net
        .sigma_head
        .backward_batch(&tape.sigma_tape, dsigmas, &mut grads.sigma_head)?;
    let view_dim = spec.view_enc().output_dim();
    let cin = spec.color_input_dim();
    let mut dfeat = dsig_in;
    for row in 0..n {
        let seg = &dcolor_in[row * cin..row * cin + w];
        let dst = &mut dfeat[row * w..(row + 1) * w];
        for (d, s) in dst.iter_mut().zip(seg) {
            *d += *s;
        }
        let phi_seg = &dcolor_in[row * cin + w + view_dim..(row + 1) * cin];
        for (g, s) in phi_grad.iter_mut().zip(phi_seg) {
            *g += *s;
        }
    }
    // through the trunk-output ReLU
    for (d, &a) in dfeat.iter_mut().zip(&tape.feat) {
        if a <= R::zero() {
            *d = R::zero();
        }
    }
    let dtrunk_in = net
        .trunk
        .backward_batch(&tape.trunk_tape, &dfeat, &mut grads.trunk)?;
    let pos_enc = spec.pos_enc();
    let enc_dim = pos_enc.output_dim();
    let tin = spec.trunk_input_dim();
    let dwarped = (0..n)
        .map(|row| {
            let seg = &dtrunk_in[row * tin..row * tin + enc_dim];
            positional_encode_backward(&tape.warped[row], pos_enc, None, seg)
        })
        .collect();
    Ok(dwarped)
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

/// Per-ray render result.
#[derive(Debug, Clone)]
pub struct RenderOutput<R> {
    pub color: [R; 3],
    /// Expected termination depth; `t_near` when the ray sees nothing.
    pub depth: R,
    pub weights: Vec<R>,
    pub opacity: R,
}

const DEPTH_EPS: f64 = 1e-10;

/// Discretized transmittance quadrature over sorted samples.
/// `delta_j = t_{j+1} - t_j`, the last interval runs to `t_far`;
/// `a_j = 1 - exp(-sigma_j delta_j)`, `w_j = T_j a_j` with
/// `T_j = prod_{k<j} (1 - a_k)`. Color composites over `background`; depth
/// is the weight-normalized expected t.
pub fn composite<R: Real>(
    ts: &[R],
    t_far: R,
    sigmas: &[R],
    rgbs: &[[R; 3]],
    background: [R; 3],
) -> Result<RenderOutput<R>> {
    let n = ts.len();
    if n == 0 || sigmas.len() != n || rgbs.len() != n {
        return Err(invalid("composite input length mismatch"));
    }
    if ts.windows(2).any(|p| p[0] > p[1]) {
        return Err(invalid("composite samples must be sorted ascending"));
    }
    let mut weights = Vec::with_capacity(n);
    let mut trans = R::one();
    let mut color = [R::zero(); 3];
    let mut depth_acc = R::zero();
    let mut opacity = R::zero();
    for j in 0..n {
        let delta = if j + 1 < n { ts[j + 1] - ts[j] } else { t_far - ts[j] };
        let alpha = R::one() - (-sigmas[j] * delta).exp();
        let wj = trans * alpha;
        weights.push(wj);
        for c in 0..3 {
            color[c] += wj * rgbs[j][c];
        }
        depth_acc += wj * ts[j];
        opacity += wj;
        trans = trans * (R::one() - alpha);
    }
    let bg_w = R::one() - opacity;
    for c in 0..3 {
        color[c] += bg_w * background[c];
    }
    let depth = if opacity > R::zero() {
        depth_acc / opacity.max(r(DEPTH_EPS))
    } else {
        ts[0]
    };
    Ok(RenderOutput {
        color,
        depth,
        weights,
        opacity,
    })
}

/// Gradient of `composite` color with respect to per-sample densities and
/// colors, given the cotangent on the output color.
pub fn composite_backward<R: Real>(
    ts: &[R],
    t_far: R,
    sigmas: &[R],
    rgbs: &[[R; 3]],
    background: [R; 3],
    out: &RenderOutput<R>,
    dcolor: [R; 3],
) -> (Vec<R>, Vec<[R; 3]>) {
    let n = ts.len();
    let mut dsigma = vec![R::zero(); n];
    let mut drgb = vec![[R::zero(); 3]; n];
    // S'_j = <dcolor, c_j - background>
    let u: R = (0..3).map(|c| dcolor[c] * background[c]).sum();
    let s: Vec<R> = (0..n)
        .map(|j| {
            let sj: R = (0..3).map(|c| dcolor[c] * rgbs[j][c]).sum();
            sj - u
        })
        .collect();
    for j in 0..n {
        for c in 0..3 {
            drgb[j][c] = out.weights[j] * dcolor[c];
        }
    }
    // transmittance past sample k: T_k * exp(-sigma_k delta_k)
    let mut trans = R::one();
    let mut trans_past = Vec::with_capacity(n);
    for j in 0..n {
        let delta = if j + 1 < n { ts[j + 1] - ts[j] } else { t_far - ts[j] };
        let surv = (-sigmas[j] * delta).exp();
        trans = trans * surv;
        trans_past.push(trans);
    }
    let mut suffix = R::zero();
    for k in (0..n).rev() {
        let delta = if k + 1 < n { ts[k + 1] - ts[k] } else { t_far - ts[k] };
        dsigma[k] = delta * (trans_past[k] * s[k] - suffix);
        suffix += out.weights[k] * s[k];
    }
    (dsigma, drgb)
}

// ---------------------------------------------------------------------------
// Ray rendering
// ---------------------------------------------------------------------------

/// Sampling and compositing settings for one render.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RenderSettings {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub jitter: bool,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            n_coarse: 64,
            n_fine: 64,
            jitter: false,
            background: [0.0; 3],
        }
    }
}

/// Per-frame conditioning for a render: the deformation and appearance
/// codes, the already-gated expression vector, and the coarse-to-fine band
/// weights for the deformation encoding.
pub struct Conditioning<'a, R> {
    pub omega: &'a [R],
    pub phi: &'a [R],
    pub beta_gated: &'a [R],
    pub band_weights: Option<&'a [R]>,
}

/// Everything a training step needs to run the reverse pass for one ray.
pub struct RayForward<R> {
    pub ts_coarse: Vec<R>,
    pub ts_fine: Vec<R>,
    pub coarse: RenderOutput<R>,
    pub fine: RenderOutput<R>,
    coarse_sigmas: Vec<R>,
    coarse_rgbs: Vec<[R; 3]>,
    fine_sigmas: Vec<R>,
    fine_rgbs: Vec<[R; 3]>,
    coarse_deform_tape: DeformTape<R>,
    coarse_field_tape: FieldTape<R>,
    fine_deform_tape: DeformTape<R>,
    fine_field_tape: FieldTape<R>,
    t_far: R,
}

fn points_on_ray<R: Real>(origin: Vec3, dir: Vec3, ts: &[R]) -> Vec<[R; 3]> {
    ts.iter()
        .map(|&t| {
            let p = add(origin, scale(dir, t.as_f64()));
            [r(p[0]), r(p[1]), r(p[2])]
        })
        .collect()
}

/// Two-pass render of a single ray: stratified coarse pass, inverse-CDF
/// importance samples from the coarse weights, fine pass over the sorted
/// union. Records tapes for the reverse pass.
#[allow(clippy::too_many_arguments)]
pub fn render_ray<R: Real>(
    params: &FieldParameters<R>,
    origin: Vec3,
    dir: Vec3,
    t_near: f64,
    t_far: f64,
    cond: &Conditioning<R>,
    settings: &RenderSettings,
    rng: &mut impl Rng,
) -> Result<RayForward<R>> {
    let spec = &params.spec;
    let ts64 = crate::camera::stratified_samples(t_near, t_far, settings.n_coarse, settings.jitter, rng)?;
    let ts_coarse: Vec<R> = ts64.iter().map(|&t| r(t)).collect();
    let view = [r(dir[0]), r(dir[1]), r(dir[2])];
    let background = settings.background.map(r::<R>);

    let xs = points_on_ray(origin, dir, &ts_coarse);
    let (warped, coarse_deform_tape) =
        deform_points(&params.deform, spec, &xs, cond.omega, cond.band_weights)?;
    let (coarse_out, coarse_field_tape) = field_pass(
        &params.coarse,
        spec,
        &warped,
        &view,
        cond.phi,
        cond.beta_gated,
    )?;
    let coarse = composite(
        &ts_coarse,
        r(t_far),
        &coarse_out.sigmas,
        &coarse_out.rgbs,
        background,
    )?;

    // importance samples from the coarse weights over the coarse bins
    let mut edges = Vec::with_capacity(ts64.len() + 1);
    edges.push(t_near);
    for w in ts64.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(t_far);
    let weights64: Vec<f64> = coarse.weights.iter().map(|w| w.as_f64().max(0.0)).collect();
    let (fine_ts64, _uniform) =
        crate::camera::importance_samples(&edges, &weights64, settings.n_fine, rng)?;
    let union = crate::camera::merge_sorted(&ts64, &fine_ts64);
    let ts_fine: Vec<R> = union.iter().map(|&t| r(t)).collect();

    let xs_fine = points_on_ray(origin, dir, &ts_fine);
    let (warped_fine, fine_deform_tape) =
        deform_points(&params.deform, spec, &xs_fine, cond.omega, cond.band_weights)?;
    let (fine_out, fine_field_tape) = field_pass(
        &params.fine,
        spec,
        &warped_fine,
        &view,
        cond.phi,
        cond.beta_gated,
    )?;
    let fine = composite(
        &ts_fine,
        r(t_far),
        &fine_out.sigmas,
        &fine_out.rgbs,
        background,
    )?;

    Ok(RayForward {
        ts_coarse,
        ts_fine,
        coarse,
        fine,
        coarse_sigmas: coarse_out.sigmas,
        coarse_rgbs: coarse_out.rgbs,
        fine_sigmas: fine_out.sigmas,
        fine_rgbs: fine_out.rgbs,
        coarse_deform_tape,
        coarse_field_tape,
        fine_deform_tape,
        fine_field_tape,
        t_far: r(t_far),
    })
}

/// Reverse pass for one rendered ray given color cotangents on both passes.
/// Accumulates into `grads` plus the touched latent rows.
#[allow(clippy::too_many_arguments)]
pub fn render_ray_backward<R: Real>(
    params: &FieldParameters<R>,
    fwd: &RayForward<R>,
    background: [f64; 3],
    dcolor_coarse: [R; 3],
    dcolor_fine: [R; 3],
    grads: &mut FieldParameters<R>,
    omega_grad: &mut [R],
    phi_grad: &mut [R],
) -> Result<()> {
    let spec = &params.spec;
    let bg = background.map(r::<R>);
    for (ts, sigmas, rgbs, out, dcolor, net, gnet, dtape, ftape) in [
        (
            &fwd.ts_coarse,
            &fwd.coarse_sigmas,
            &fwd.coarse_rgbs,
            &fwd.coarse,
            dcolor_coarse,
            &params.coarse,
            0usize,
            &fwd.coarse_deform_tape,
            &fwd.coarse_field_tape,
        ),
        (
            &fwd.ts_fine,
            &fwd.fine_sigmas,
            &fwd.fine_rgbs,
            &fwd.fine,
            dcolor_fine,
            &params.fine,
            1usize,
            &fwd.fine_deform_tape,
            &fwd.fine_field_tape,
        ),
    ] {
        let (dsigma, drgb) = composite_backward(ts, fwd.t_far, sigmas, rgbs, bg, out, dcolor);
        let grads_net = if gnet == 0 { &mut grads.coarse } else { &mut grads.fine };
        let dwarped = field_backward(net, spec, ftape, &dsigma, &drgb, grads_net, phi_grad)?;
        deform_backward(&params.deform, spec, dtape, &dwarped, &mut grads.deform, omega_grad)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// RGB image in linear [0,1] floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: [f32; 3]) {
        self.pixels[row * self.width + col] = v;
    }

    /// 8-bit RGB PNG; values clamped to [0,1] and rounded.
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let buf: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|p| p.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized to dimensions");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        Ok(Image {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img
                .pixels()
                .map(|p| [p.0[0] as f32 / 255.0, p.0[1] as f32 / 255.0, p.0[2] as f32 / 255.0])
                .collect(),
        })
    }
}

/// Depth map in ray-t units.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct DepthSidecar {
    t_near: f64,
    t_far: f64,
    /// Stored 16-bit value = (t - t_near) / scale * 65535.
    scale: f64,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    /// 16-bit grayscale PNG normalized by `(t_far - t_near)`, with the scale
    /// recorded in a JSON sidecar next to the image.
    pub fn save_png(&self, path: &std::path::Path, t_near: f64, t_far: f64) -> Result<()> {
        let scale = t_far - t_near;
        let buf: Vec<u16> = self
            .values
            .iter()
            .map(|&t| (((t as f64 - t_near) / scale).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            self.width as u32,
            self.height as u32,
            buf,
        )
        .expect("buffer sized to dimensions");
        img.save(path)?;
        let sidecar = DepthSidecar {
            t_near,
            t_far,
            scale,
        };
        let sc_path = path.with_extension("json");
        std::fs::write(&sc_path, serde_json::to_vec_pretty(&sidecar)?)
            .map_err(|e| Error::io(&sc_path, e))?;
        Ok(())
    }
}

/// Full-frame render: coarse pass, importance sampling, fine pass; the
/// fine-pass color is the reported pixel. Pixels are processed in fixed
/// chunks so output is independent of thread count.
#[allow(clippy::too_many_arguments)]
pub fn render_image<R: Real>(
    params: &FieldParameters<R>,
    camera: &Camera,
    t_near: f64,
    t_far: f64,
    omega: &[R],
    phi: &[R],
    beta: &[R],
    mask: Option<&SilhouetteMask>,
    band_weights: Option<&[R]>,
    settings: &RenderSettings,
    seed: u64,
) -> Result<(Image, DepthMap)> {
    use rayon::prelude::*;
    camera.validate()?;
    if let Some(m) = mask {
        if m.width != camera.width || m.height != camera.height {
            return Err(invalid("mask dimensions do not match camera"));
        }
    }
    let beta_zero = vec![R::zero(); BETA_DIM];
    let npix = camera.width * camera.height;
    let chunk = 256usize;
    type PixelChunk<R> = Vec<([R; 3], R)>;
    let results: Vec<Result<PixelChunk<R>>> = (0..npix.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(npix);
            let mut out = Vec::with_capacity(hi - lo);
            for pix in lo..hi {
                let (row, col) = (pix / camera.width, pix % camera.width);
                let indicator = mask.is_none_or(|m| m.get(row, col));
                let beta_gated: &[R] = if indicator { beta } else { &beta_zero };
                let cond = Conditioning {
                    omega,
                    phi,
                    beta_gated,
                    band_weights,
                };
                let mut rng = crate::camera::ray_rng(seed, 0, pix as u64);
                let fwd = render_ray(
                    params,
                    camera.position(),
                    camera.ray_direction(row, col),
                    t_near,
                    t_far,
                    &cond,
                    settings,
                    &mut rng,
                )?;
                out.push((fwd.fine.color, fwd.fine.depth));
            }
            Ok(out)
        })
        .collect();
    let mut image = Image::new(camera.width, camera.height);
    let mut depth = DepthMap::new(camera.width, camera.height);
    let mut pix = 0;
    for chunk_res in results {
        for (color, d) in chunk_res? {
            image.pixels[pix] = [
                color[0].as_f64() as f32,
                color[1].as_f64() as f32,
                color[2].as_f64() as f32,
            ];
            depth.values[pix] = d.as_f64() as f32;
            pix += 1;
        }
    }
    Ok((image, depth))
}
