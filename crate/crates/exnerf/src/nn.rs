//! Minimal reverse-mode differentiable core.
//!
//! Dense MLPs with ReLU hidden layers and an optional skip connection,
//! per-frame latent-code tables, Adam with bias correction, and the binary
//! checkpoint format. Forward passes record activations on a tape; backward
//! passes add gradients into caller-owned gradient structures so that
//! accumulation order stays under the caller's control (determinism).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::real::{r, Real};

/// Final nonlinearity of an MLP output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Sigmoid,
    Softplus,
}

/// Architecture of one MLP: `depth` ReLU hidden layers of `hidden_width`
/// units followed by a linear output layer with `final_activation`.
/// `skip_layer`, when set, concatenates the original input onto that hidden
/// layer's input (strictly inside `(0, depth)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub skip_layer: Option<usize>,
    pub output_dim: usize,
    pub final_activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(invalid("mlp input and output dims must be positive"));
        }
        if self.depth > 0 && self.hidden_width == 0 {
            return Err(invalid("hidden width must be positive"));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.depth {
                return Err(invalid(format!(
                    "skip layer {s} must lie strictly inside (0, {})",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    /// Input width of layer `i` (0..=depth; `depth` is the output layer).
    fn layer_in(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else if self.skip_layer == Some(i) {
            self.hidden_width + self.input_dim
        } else {
            self.hidden_width
        }
    }

    fn layer_out(&self, i: usize) -> usize {
        if i == self.depth {
            self.output_dim
        } else {
            self.hidden_width
        }
    }
}

/// One dense layer, row-major `out_dim x in_dim` weights.
#[derive(Debug, Clone)]
pub struct Dense<R> {
    pub w: Vec<R>,
    pub b: Vec<R>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<R: Real> Dense<R> {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: vec![R::zero(); in_dim * out_dim],
            b: vec![R::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    fn init_kaiming(&mut self, rng: &mut impl Rng) {
        // uniform fan-in scaling
        let bound = (6.0 / self.in_dim as f64).sqrt();
        for w in &mut self.w {
            *w = r(rng.gen_range(-bound..bound));
        }
    }
}

/// A multi-layer perceptron. The same structure doubles as the gradient
/// buffer for an MLP of identical shape.
#[derive(Debug, Clone)]
pub struct Mlp<R> {
    pub spec: MlpSpec,
    pub layers: Vec<Dense<R>>,
}

/// Activations recorded by a forward pass over a batch of `n` rows.
pub struct MlpTape<R> {
    n: usize,
    input: Vec<R>,
    /// Post-ReLU activations per hidden layer, each `n x hidden`.
    hidden: Vec<Vec<R>>,
    /// Pre-activation of the output layer, `n x output_dim`.
    pre_out: Vec<R>,
    consumed: std::cell::Cell<bool>,
}

impl<R: Real> Mlp<R> {
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.depth + 1);
        for i in 0..=spec.depth {
            let mut l = Dense::zeros(spec.layer_in(i), spec.layer_out(i));
            l.init_kaiming(rng);
            layers.push(l);
        }
        Ok(Mlp { spec, layers })
    }

    /// Gradient buffer of the same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        Mlp {
            spec: self.spec,
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    /// Zero the output layer so the net starts as the constant-zero map.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("mlp has layers");
        for w in &mut last.w {
            *w = R::zero();
        }
        for b in &mut last.b {
            *b = R::zero();
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += *y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += *y;
            }
        }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = R::zero());
            l.b.iter_mut().for_each(|v| *v = R::zero());
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward over a batch of `n` input rows, recording a tape.
    pub fn forward_batch(&self, input: &[R], n: usize) -> Result<(Vec<R>, MlpTape<R>)> {
        if input.len() != n * self.spec.input_dim {
            return Err(invalid(format!(
                "mlp input length {} != {} rows x {} dims",
                input.len(),
                n,
                self.spec.input_dim
            )));
        }
        let mut hidden: Vec<Vec<R>> = Vec::with_capacity(self.spec.depth);
        let mut cur: &[R] = input;
        let mut skip_buf: Vec<R>;
        for i in 0..self.spec.depth {
            let layer = &self.layers[i];
            let src: &[R] = if self.spec.skip_layer == Some(i) {
                // concat(activation, original input) per row
                skip_buf = Vec::with_capacity(n * layer.in_dim);
                let h = self.spec.hidden_width;
                for row in 0..n {
                    skip_buf.extend_from_slice(&cur[row * h..(row + 1) * h]);
                    skip_buf.extend_from_slice(
                        &input[row * self.spec.input_dim..(row + 1) * self.spec.input_dim],
                    );
                }
                &skip_buf
            } else {
                cur
            };
            let mut out = vec![R::zero(); n * layer.out_dim];
            linear_forward(layer, src, n, &mut out);
            out.iter_mut().for_each(|v| {
                if *v < R::zero() {
                    *v = R::zero()
                }
            });
            hidden.push(out);
            cur = hidden.last().expect("just pushed");
        }
        let out_layer = &self.layers[self.spec.depth];
        // the output layer never carries the skip concat
        let mut pre_out = vec![R::zero(); n * out_layer.out_dim];
        linear_forward(out_layer, cur, n, &mut pre_out);
        let out = apply_activation(self.spec.final_activation, &pre_out);
        Ok((
            out,
            MlpTape {
                n,
                input: input.to_vec(),
                hidden,
                pre_out,
                consumed: std::cell::Cell::new(false),
            },
        ))
    }

    /// Single-row forward.
    pub fn forward(&self, input: &[R]) -> Result<(Vec<R>, MlpTape<R>)> {
        self.forward_batch(input, 1)
    }

    /// Forward without recording (evaluation only).
    pub fn forward_only_batch(&self, input: &[R], n: usize) -> Result<Vec<R>> {
        self.forward_batch(input, n).map(|(out, _)| out)
    }

    /// Reverse pass: adds parameter gradients into `grads` (a zeros_like
    /// sibling) and returns the gradient on the batch input. The tape can be
    /// consumed once.
    pub fn backward_batch(
        &self,
        tape: &MlpTape<R>,
        out_grad: &[R],
        grads: &mut Mlp<R>,
    ) -> Result<Vec<R>> {
        if tape.consumed.get() {
            return Err(Error::State("mlp tape already consumed".into()));
        }
        tape.consumed.set(true);
        let n = tape.n;
        let out_layer = &self.layers[self.spec.depth];
        if out_grad.len() != n * out_layer.out_dim {
            return Err(invalid("output gradient shape mismatch"));
        }
        // through the final activation
        let mut dpre: Vec<R> = match self.spec.final_activation {
            Activation::None => out_grad.to_vec(),
            Activation::Sigmoid => tape
                .pre_out
                .iter()
                .zip(out_grad)
                .map(|(&p, &g)| {
                    let y = sigmoid(p);
                    g * y * (R::one() - y)
                })
                .collect(),
            Activation::Softplus => tape
                .pre_out
                .iter()
                .zip(out_grad)
                .map(|(&p, &g)| g * sigmoid(p))
                .collect(),
        };
        let mut skip_input_grads: Vec<Vec<R>> = Vec::new();
        let last_in: &[R] = if self.spec.depth == 0 {
            &tape.input
        } else {
            &tape.hidden[self.spec.depth - 1]
        };
        let mut dcur =
            linear_backward(out_layer, last_in, n, &dpre, &mut grads.layers[self.spec.depth]);
        for i in (0..self.spec.depth).rev() {
            // through ReLU of layer i
            for (d, &a) in dcur.iter_mut().zip(&tape.hidden[i]) {
                if a <= R::zero() {
                    *d = R::zero();
                }
            }
            dpre = dcur;
            let layer = &self.layers[i];
            let skip = self.spec.skip_layer == Some(i);
            let src_owned: Vec<R>;
            let src: &[R] = if i == 0 && !skip {
                &tape.input
            } else if skip {
                let h = self.spec.hidden_width;
                let idim = self.spec.input_dim;
                let prev = &tape.hidden[i - 1];
                let mut buf = Vec::with_capacity(n * (h + idim));
                for row in 0..n {
                    buf.extend_from_slice(&prev[row * h..(row + 1) * h]);
                    buf.extend_from_slice(&tape.input[row * idim..(row + 1) * idim]);
                }
                src_owned = buf;
                &src_owned
            } else {
                &tape.hidden[i - 1]
            };
            let dsrc = linear_backward(layer, src, n, &dpre, &mut grads.layers[i]);
            if skip {
                // split concat gradient: activation part continues upstream,
                // input part joins the input gradient at the end
                let h = self.spec.hidden_width;
                let idim = self.spec.input_dim;
                let mut dact = vec![R::zero(); n * h];
                let mut dinp = vec![R::zero(); n * idim];
                for row in 0..n {
                    dact[row * h..(row + 1) * h]
                        .copy_from_slice(&dsrc[row * (h + idim)..row * (h + idim) + h]);
                    dinp[row * idim..(row + 1) * idim].copy_from_slice(
                        &dsrc[row * (h + idim) + h..(row + 1) * (h + idim)],
                    );
                }
                // stash input grad until the loop finishes
                skip_input_grads.push(dinp);
                dcur = dact;
            } else {
                dcur = dsrc;
            }
        }
        let mut dinput = dcur;
        for extra in skip_input_grads {
            for (a, b) in dinput.iter_mut().zip(extra) {
                *a += b;
            }
        }
        Ok(dinput)
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

fn apply_activation<R: Real>(act: Activation, pre: &[R]) -> Vec<R> {
    match act {
        Activation::None => pre.to_vec(),
        Activation::Sigmoid => pre.iter().map(|&x| sigmoid(x)).collect(),
        Activation::Softplus => pre
            .iter()
            .map(|&x| {
                // numerically stable softplus
                if x > r(20.0) {
                    x
                } else {
                    (R::one() + x.exp()).ln()
                }
            })
            .collect(),
    }
}

/// `out[row] = W * src[row] + b` for each of `n` rows.
fn linear_forward<R: Real>(layer: &Dense<R>, src: &[R], n: usize, out: &mut [R]) {
    let (id, od) = (layer.in_dim, layer.out_dim);
    for row in 0..n {
        let x = &src[row * id..(row + 1) * id];
        let y = &mut out[row * od..(row + 1) * od];
        for o in 0..od {
            let wrow = &layer.w[o * id..(o + 1) * id];
            let mut acc = layer.b[o];
            for (wi, xi) in wrow.iter().zip(x) {
                acc += *wi * *xi;
            }
            y[o] = acc;
        }
    }
}

/// Accumulates `dW += dy^T x`, `db += sum dy` and returns `dx = dy W`.
fn linear_backward<R: Real>(
    layer: &Dense<R>,
    src: &[R],
    n: usize,
    dy: &[R],
    grad: &mut Dense<R>,
) -> Vec<R> {
    let (id, od) = (layer.in_dim, layer.out_dim);
    let mut dx = vec![R::zero(); n * id];
    for row in 0..n {
        let x = &src[row * id..(row + 1) * id];
        let g = &dy[row * od..(row + 1) * od];
        let dxr = &mut dx[row * id..(row + 1) * id];
        for o in 0..od {
            let go = g[o];
            if go == R::zero() {
                continue;
            }
            grad.b[o] += go;
            let wrow = &layer.w[o * id..(o + 1) * id];
            let gwrow = &mut grad.w[o * id..(o + 1) * id];
            for i in 0..id {
                gwrow[i] += go * x[i];
                dxr[i] += go * wrow[i];
            }
        }
    }
    dx
}

/// Per-frame latent codes: one deformation row and one appearance row per
/// training frame, zero-initialized.
#[derive(Debug, Clone)]
pub struct LatentTable<R> {
    pub frames: usize,
    pub deform_dim: usize,
    pub appearance_dim: usize,
    /// `frames x deform_dim`, row-major.
    pub deform: Vec<R>,
    /// `frames x appearance_dim`, row-major.
    pub appearance: Vec<R>,
}

impl<R: Real> LatentTable<R> {
    pub fn new(frames: usize, deform_dim: usize, appearance_dim: usize) -> Self {
        LatentTable {
            frames,
            deform_dim,
            appearance_dim,
            deform: vec![R::zero(); frames * deform_dim],
            appearance: vec![R::zero(); frames * appearance_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.frames, self.deform_dim, self.appearance_dim)
    }

    pub fn lookup(&self, frame: usize) -> Result<(&[R], &[R])> {
        if frame >= self.frames {
            return Err(invalid(format!(
                "frame {frame} out of range ({} frames)",
                self.frames
            )));
        }
        Ok((
            &self.deform[frame * self.deform_dim..(frame + 1) * self.deform_dim],
            &self.appearance[frame * self.appearance_dim..(frame + 1) * self.appearance_dim],
        ))
    }

    /// Panics on an out-of-range frame; use `lookup` at trust boundaries.
    pub fn lookup_deform(&self, frame: usize) -> &[R] {
        &self.deform[frame * self.deform_dim..(frame + 1) * self.deform_dim]
    }

    pub fn lookup_appearance(&self, frame: usize) -> &[R] {
        &self.appearance[frame * self.appearance_dim..(frame + 1) * self.appearance_dim]
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.deform.iter_mut().zip(&other.deform) {
            *a += *b;
        }
        for (a, b) in self.appearance.iter_mut().zip(&other.appearance) {
            *a += *b;
        }
    }

    pub fn zero(&mut self) {
        self.deform.iter_mut().for_each(|v| *v = R::zero());
        self.appearance.iter_mut().for_each(|v| *v = R::zero());
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_len: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
        }
    }
}

/// One Adam update with bias correction over flat parameter/gradient views.
/// `names` maps flat offsets to tensor names for divergence diagnostics.
/// Gradients are zeroed afterwards.
pub fn adam_step<R: Real>(
    state: &mut AdamState,
    params: &mut [R],
    grads: &mut [R],
    lr: f64,
    names: &[(String, std::ops::Range<usize>)],
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            let name = names
                .iter()
                .find(|(_, range)| range.contains(&i))
                .map(|(n, _)| n.as_str())
                .unwrap_or("<unknown>");
            return Err(Error::Divergence(format!(
                "non-finite gradient in parameter '{name}' (flat index {i})"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        let p = params[i].as_f64() - lr * mhat / (vhat.sqrt() + state.eps);
        if !p.is_finite() {
            let name = names
                .iter()
                .find(|(_, range)| range.contains(&i))
                .map(|(n, _)| n.as_str())
                .unwrap_or("<unknown>");
            return Err(Error::Divergence(format!(
                "non-finite parameter '{name}' after update (flat index {i})"
            )));
        }
        params[i] = r(p);
        grads[i] = R::zero();
    }
    Ok(())
}

/// Exponential learning-rate interpolation from `lr_start` to `lr_end` over
/// `total` iterations.
pub fn lr_schedule(lr_start: f64, lr_end: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return lr_start;
    }
    let frac = (t as f64 / total as f64).min(1.0);
    lr_start * (lr_end / lr_start).powf(frac)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EXNF0001";

/// One named tensor in a checkpoint, in header order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub params: Vec<CheckpointEntry>,
    pub iteration: u64,
    pub optimizer_state: bool,
    /// Echo of the configuration the checkpoint was produced under.
    pub config: serde_json::Value,
}

/// Serializes: magic, u32 LE header length, JSON header, then for every
/// entry its f32 LE payload; with optimizer state, the Adam `m` then `v`
/// arrays follow in the same order (Adam step lives in the header config
/// echo's sibling field below).
pub fn write_checkpoint(
    path: &std::path::Path,
    header: &CheckpointHeader,
    payloads: &[&[f32]],
    adam: Option<(&AdamState, u64)>,
) -> Result<()> {
    use std::io::Write;
    if header.params.len() != payloads.len() {
        return Err(invalid("checkpoint entry/payload count mismatch"));
    }
    for (e, p) in header.params.iter().zip(payloads) {
        let n: usize = e.shape.iter().product();
        if n != p.len() {
            return Err(invalid(format!(
                "checkpoint tensor '{}' shape product {n} != payload {}",
                e.name,
                p.len()
            )));
        }
    }
    let mut header_json = serde_json::to_value(header)?;
    if let Some((state, _)) = adam {
        header_json["adam_step"] = serde_json::json!(state.step);
    }
    let header_bytes = serde_json::to_vec(&header_json)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?,
    );
    let werr = |e| Error::io(path, e);
    f.write_all(CHECKPOINT_MAGIC).map_err(werr)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(werr)?;
    f.write_all(&header_bytes).map_err(werr)?;
    for p in payloads {
        for v in *p {
            f.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    if let Some((state, _)) = adam {
        // moments are kept in f64 and stored as f64 so that a restored run
        // continues bit-identically
        for buf in [&state.m, &state.v] {
            for v in buf {
                f.write_all(&v.to_le_bytes()).map_err(werr)?;
            }
        }
    }
    f.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .sync_all()
        .map_err(werr)?;
    std::fs::rename(&tmp, path).map_err(werr)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub payloads: Vec<Vec<f32>>,
    pub adam: Option<AdamState>,
}

pub fn read_checkpoint(path: &std::path::Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::UnsupportedFormat("truncated checkpoint header".into()));
    }
    let header_json: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen])?;
    let header: CheckpointHeader = serde_json::from_value(header_json.clone())?;
    let mut off = 12 + hlen;
    let mut payloads = Vec::with_capacity(header.params.len());
    let mut total = 0usize;
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        total += n;
        let end = off + 4 * n;
        if bytes.len() < end {
            return Err(Error::UnsupportedFormat(format!(
                "truncated checkpoint payload for '{}'",
                e.name
            )));
        }
        let vals: Vec<f32> = bytes[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        payloads.push(vals);
        off = end;
    }
    let adam = if header.optimizer_state {
        let end = off + 16 * total;
        if bytes.len() < end {
            return Err(Error::UnsupportedFormat(
                "truncated checkpoint optimizer state".into(),
            ));
        }
        let mut state = AdamState::new(total);
        for (buf, k) in [(&mut state.m, 0usize), (&mut state.v, 1usize)] {
            let base = off + 8 * total * k;
            for (i, c) in bytes[base..base + 8 * total].chunks_exact(8).enumerate() {
                buf[i] = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        state.step = header_json
            .get("adam_step")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        Some(state)
    } else {
        None
    };
    Ok(LoadedCheckpoint {
        header,
        payloads,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(input: usize, width: usize, depth: usize, out: usize, act: Activation) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden_width: width,
            depth,
            skip_layer: None,
            output_dim: out,
            final_activation: act,
        }
    }

    /// Straightforward re-evaluation, written independently of the batched
    /// forward path: plain per-layer loops, no tape.
    fn naive_eval(mlp: &Mlp<f64>, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        for (i, layer) in mlp.layers.iter().enumerate() {
            let src = if mlp.spec.skip_layer == Some(i) {
                let mut s = cur.clone();
                s.extend_from_slice(input);
                s
            } else {
                cur.clone()
            };
            let mut next = vec![0.0; layer.out_dim];
            for o in 0..layer.out_dim {
                let mut acc = layer.b[o];
                for i2 in 0..layer.in_dim {
                    acc += layer.w[o * layer.in_dim + i2] * src[i2];
                }
                next[o] = acc;
            }
            if i < mlp.spec.depth {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            } else {
                match mlp.spec.final_activation {
                    Activation::None => {}
                    Activation::Sigmoid => {
                        for v in &mut next {
                            *v = 1.0 / (1.0 + (-*v).exp());
                        }
                    }
                    Activation::Softplus => {
                        for v in &mut next {
                            *v = (1.0 + v.exp()).ln();
                        }
                    }
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let s = spec(4, 8, 2, 3, Activation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::new(s, &mut rng).unwrap();
        for l in &mut mlp.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let (out, _) = mlp.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let s = spec(3, 0, 0, 3, Activation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::new(s, &mut rng).unwrap();
        let l = &mut mlp.layers[0];
        l.w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            l.w[i * 3 + i] = 1.0;
        }
        l.b.iter_mut().for_each(|v| *v = 0.0);
        let x = [0.3, -1.7, 2.4];
        let (out, _) = mlp.forward(&x).unwrap();
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for skip in [None, Some(1)] {
            let mut s = spec(5, 16, 3, 4, Activation::Sigmoid);
            s.skip_layer = skip;
            let mlp = Mlp::<f64>::new(s, &mut rng).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (out, _) = mlp.forward(&x).unwrap();
            let naive = naive_eval(&mlp, &x);
            for (a, b) in out.iter().zip(&naive) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_map_weight_gradient() {
        // f(x) = Wx: dW = g * x^T
        let s = spec(3, 0, 0, 2, Activation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::<f64>::new(s, &mut rng).unwrap();
        let x = [1.0, 2.0, 3.0];
        let g = [0.5, -0.25];
        let (_, tape) = mlp.forward(&x).unwrap();
        let mut grads = mlp.zeros_like();
        mlp.backward_batch(&tape, &g, &mut grads).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((grads.layers[0].w[o * 3 + i] - g[o] * x[i]).abs() < 1e-15);
            }
            assert!((grads.layers[0].b[o] - g[o]).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = spec(4, 8, 3, 1, Activation::Softplus);
        s.skip_layer = Some(2);
        let mlp = Mlp::<f64>::new(s, &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, tape) = mlp.forward(&x).unwrap();
        let mut grads = mlp.zeros_like();
        let dx = mlp.backward_batch(&tape, &[1.0], &mut grads).unwrap();
        let h = 1e-5;
        // input gradient
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fp = mlp.forward_only_batch(&xp, 1).unwrap()[0];
            let fm = mlp.forward_only_batch(&xm, 1).unwrap()[0];
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - dx[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "input {i}: fd {fd} analytic {}", dx[i]);
        }
        // a sampling of weight gradients
        let mut probe = mlp.clone();
        for (li, oi) in [(0usize, 3usize), (1, 10), (2, 0), (3, 2)] {
            let orig = probe.layers[li].w[oi];
            probe.layers[li].w[oi] = orig + h;
            let fp = probe.forward_only_batch(&x, 1).unwrap()[0];
            probe.layers[li].w[oi] = orig - h;
            let fm = probe.forward_only_batch(&x, 1).unwrap()[0];
            probe.layers[li].w[oi] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.layers[li].w[oi];
            let rel = (fd - an).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "layer {li} w[{oi}]: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn two_backward_calls_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = spec(3, 6, 2, 2, Activation::None);
        let mlp = Mlp::<f64>::new(s, &mut rng).unwrap();
        let x = [0.2, -0.4, 0.9];
        let g = [1.0, -2.0];
        let (_, t1) = mlp.forward(&x).unwrap();
        let mut once = mlp.zeros_like();
        mlp.backward_batch(&t1, &g, &mut once).unwrap();
        let (_, t2) = mlp.forward(&x).unwrap();
        let (_, t3) = mlp.forward(&x).unwrap();
        let mut twice = mlp.zeros_like();
        mlp.backward_batch(&t2, &g, &mut twice).unwrap();
        mlp.backward_batch(&t3, &g, &mut twice).unwrap();
        for (a, b) in once.layers.iter().zip(&twice.layers) {
            for (x1, x2) in a.w.iter().zip(&b.w) {
                assert!((2.0 * x1 - x2).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tape_consumed_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = spec(3, 6, 2, 2, Activation::None);
        let mlp = Mlp::<f64>::new(s, &mut rng).unwrap();
        let (_, tape) = mlp.forward(&[0.1, 0.2, 0.3]).unwrap();
        let mut grads = mlp.zeros_like();
        mlp.backward_batch(&tape, &[1.0, 1.0], &mut grads).unwrap();
        assert!(matches!(
            mlp.backward_batch(&tape, &[1.0, 1.0], &mut grads),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut params = vec![0.5f64, -1.25, 3.0];
        let mut grads = vec![0.0f64; 3];
        let mut state = AdamState::new(3);
        let names = vec![("p".to_string(), 0..3)];
        adam_step(&mut state, &mut params, &mut grads, 1e-3, &names).unwrap();
        assert_eq!(params, vec![0.5, -1.25, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![0.0f64; 4];
        let mut grads = vec![1.0f64; 4];
        let mut state = AdamState::new(4);
        let names = vec![("p".to_string(), 0..4)];
        adam_step(&mut state, &mut params, &mut grads, 1e-3, &names).unwrap();
        for p in &params {
            assert!((p + 1e-3).abs() < 1e-8, "bias-corrected first step: {p}");
        }
        assert!(grads.iter().all(|g| *g == 0.0), "gradients zeroed");
    }

    #[test]
    fn adam_nonfinite_gradient_names_parameter() {
        let mut params = vec![0.0f64; 4];
        let mut grads = vec![1.0, f64::NAN, 1.0, 1.0];
        let mut state = AdamState::new(4);
        let names = vec![("a".to_string(), 0..2), ("b".to_string(), 2..4)];
        let err = adam_step(&mut state, &mut params, &mut grads, 1e-3, &names).unwrap_err();
        match err {
            Error::Divergence(msg) => assert!(msg.contains("'a'"), "{msg}"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let total = 150_000;
        assert!((lr_schedule(1e-3, 5e-4, 0, total) - 1e-3).abs() < 1e-12);
        assert!((lr_schedule(1e-3, 5e-4, total, total) - 5e-4).abs() < 1e-12);
        let mid = lr_schedule(1e-3, 5e-4, total / 2, total);
        assert!(mid < 1e-3 && mid > 5e-4);
    }

    #[test]
    fn latent_table_zero_init_and_bounds() {
        let table = LatentTable::<f32>::new(700, 128, 8);
        assert_eq!(table.frames, 700);
        let (omega, phi) = table.lookup(123).unwrap();
        assert_eq!(omega.len(), 128);
        assert_eq!(phi.len(), 8);
        assert!(omega.iter().all(|v| *v == 0.0));
        assert!(phi.iter().all(|v| *v == 0.0));
        assert!(table.lookup(700).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let a: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..5).map(|i| 1.0 / (i as f32 + 1.0)).collect();
        let header = CheckpointHeader {
            params: vec![
                CheckpointEntry {
                    name: "a".into(),
                    shape: vec![3, 4],
                },
                CheckpointEntry {
                    name: "b".into(),
                    shape: vec![5],
                },
            ],
            iteration: 42,
            optimizer_state: true,
            config: serde_json::json!({"seed": 7}),
        };
        let mut adam = AdamState::new(17);
        adam.step = 42;
        adam.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        adam.v.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.01);
        write_checkpoint(&path, &header, &[&a, &b], Some((&adam, 42))).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.header.iteration, 42);
        assert_eq!(loaded.payloads[0], a);
        assert_eq!(loaded.payloads[1], b);
        let la = loaded.adam.unwrap();
        assert_eq!(la.step, 42);
        assert_eq!(la.m, adam.m);
        assert_eq!(la.v, adam.v);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let a: Vec<f32> = vec![1.0; 10];
        let header = CheckpointHeader {
            params: vec![CheckpointEntry {
                name: "a".into(),
                shape: vec![10],
            }],
            iteration: 0,
            optimizer_state: false,
            config: serde_json::Value::Null,
        };
        write_checkpoint(&path, &header, &[&a], None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::UnsupportedFormat(_))
        ));
        std::fs::write(&path, b"NOTMAGIC rest").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::UnsupportedFormat(_))
        ));
    }
}
