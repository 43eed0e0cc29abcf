//! Positional encoding and the coarse-to-fine frequency schedule.
//!
//! The encoding maps a 3-vector to `(x, sin(2^0 x), cos(2^0 x), ...,
//! sin(2^{m-1} x), cos(2^{m-1} x))`, identity first, then one sin block and
//! one cos block per band with components interleaved per band. The
//! coarse-to-fine schedule ramps the weight of band `l` from 0 to 1 as the
//! schedule scalar `alpha` passes through `[l, l+1]`; it applies only to the
//! deformation network's coordinate input.

use crate::error::{invalid, Result};
use crate::real::Real;

/// Frequency-band configuration for a positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingSpec {
    /// Number of frequency bands `m`.
    pub bands: usize,
}

impl EncodingSpec {
    pub fn new(bands: usize) -> Result<Self> {
        if bands == 0 {
            return Err(invalid("encoding needs at least one frequency band"));
        }
        Ok(EncodingSpec { bands })
    }

    /// Encoded length: identity plus sin/cos per band per component.
    pub fn output_dim(&self) -> usize {
        3 + 6 * self.bands
    }
}

/// Coarse-to-fine schedule state: `alpha(t) = m * t / horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtfSchedule {
    pub bands: usize,
    /// Iteration after which every band weight is 1.
    pub horizon: u64,
}

impl CtfSchedule {
    pub fn new(bands: usize, horizon: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("coarse-to-fine horizon must be positive"));
        }
        Ok(CtfSchedule { bands, horizon })
    }

    /// Schedule scalar at iteration `t`.
    pub fn alpha(&self, t: u64) -> f64 {
        self.bands as f64 * t as f64 / self.horizon as f64
    }
}

/// Weight of frequency band `l` at schedule scalar `alpha`:
/// `(1 - cos(pi * clamp(alpha - l, 0, 1))) / 2`.
pub fn ctf_weight(l: usize, bands: usize, alpha: f64) -> Result<f64> {
    if l >= bands {
        return Err(invalid(format!(
            "band index {l} out of range for {bands} bands"
        )));
    }
    let x = (alpha - l as f64).clamp(0.0, 1.0);
    Ok((1.0 - (std::f64::consts::PI * x).cos()) / 2.0)
}

/// All band weights at schedule scalar `alpha`.
pub fn ctf_weights(bands: usize, alpha: f64) -> Vec<f64> {
    (0..bands)
        .map(|l| ctf_weight(l, bands, alpha).expect("l < bands"))
        .collect()
}

fn check_finite<R: Real>(x: &[R; 3]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite encoding input {x:?}")));
    }
    Ok(())
}

/// Encode `x` into `out` (appending). Layout: identity, then per band `k`
/// the weighted `sin(2^k x)` components followed by the weighted
/// `cos(2^k x)` components. `band_weights`, when given, must hold one weight
/// in `[0, 1]` per band; absent weights are all 1.
pub fn positional_encode_into<R: Real>(
    x: &[R; 3],
    spec: EncodingSpec,
    band_weights: Option<&[R]>,
    out: &mut Vec<R>,
) -> Result<()> {
    check_finite(x)?;
    if let Some(w) = band_weights {
        if w.len() != spec.bands {
            return Err(invalid(format!(
                "expected {} band weights, got {}",
                spec.bands,
                w.len()
            )));
        }
    }
    out.extend_from_slice(x);
    let mut freq = R::one();
    for k in 0..spec.bands {
        let w = band_weights.map_or(R::one(), |bw| bw[k]);
        for c in 0..3 {
            out.push(w * (freq * x[c]).sin());
        }
        for c in 0..3 {
            out.push(w * (freq * x[c]).cos());
        }
        freq = freq + freq;
    }
    Ok(())
}

/// Encode `x`, returning a fresh vector of length `3 + 6m`.
pub fn positional_encode<R: Real>(
    x: &[R; 3],
    spec: EncodingSpec,
    band_weights: Option<&[R]>,
) -> Result<Vec<R>> {
    let mut out = Vec::with_capacity(spec.output_dim());
    positional_encode_into(x, spec, band_weights, &mut out)?;
    Ok(out)
}

/// Pull a gradient on the encoded vector back to a gradient on `x`.
pub fn positional_encode_backward<R: Real>(
    x: &[R; 3],
    spec: EncodingSpec,
    band_weights: Option<&[R]>,
    out_grad: &[R],
) -> [R; 3] {
    debug_assert_eq!(out_grad.len(), spec.output_dim());
    let mut gx = [out_grad[0], out_grad[1], out_grad[2]];
    let mut freq = R::one();
    let mut idx = 3;
    for k in 0..spec.bands {
        let w = band_weights.map_or(R::one(), |bw| bw[k]);
        for c in 0..3 {
            // d/dx of w*sin(f x) is w*f*cos(f x)
            gx[c] += out_grad[idx + c] * w * freq * (freq * x[c]).cos();
        }
        for c in 0..3 {
            gx[c] -= out_grad[idx + 3 + c] * w * freq * (freq * x[c]).sin();
        }
        idx += 6;
        freq = freq + freq;
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vector_one_band() {
        let spec = EncodingSpec::new(1).unwrap();
        let out = positional_encode(&[0.0f64, 0.0, 0.0], spec, None).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn output_lengths() {
        for m in 1..=16 {
            let spec = EncodingSpec::new(m).unwrap();
            let out = positional_encode(&[0.3f64, -1.2, 2.0], spec, None).unwrap();
            assert_eq!(out.len(), 3 + 6 * m);
        }
        assert_eq!(EncodingSpec::new(10).unwrap().output_dim(), 63);
        assert_eq!(EncodingSpec::new(4).unwrap().output_dim(), 27);
    }

    #[test]
    fn pi_first_band() {
        let spec = EncodingSpec::new(1).unwrap();
        let out = positional_encode(&[std::f64::consts::PI, 0.0, 0.0], spec, None).unwrap();
        assert!(out[3].abs() < 1e-12, "sin(pi) component");
        assert!((out[6] + 1.0).abs() < 1e-12, "cos(pi) component");
    }

    #[test]
    fn non_finite_rejected() {
        let spec = EncodingSpec::new(2).unwrap();
        assert!(positional_encode(&[f64::NAN, 0.0, 0.0], spec, None).is_err());
        assert!(positional_encode(&[0.0, f64::INFINITY, 0.0], spec, None).is_err());
    }

    #[test]
    fn unit_weights_match_unweighted() {
        let spec = EncodingSpec::new(5).unwrap();
        let x = [0.7f64, -0.1, 1.9];
        let ones = vec![1.0f64; 5];
        assert_eq!(
            positional_encode(&x, spec, None).unwrap(),
            positional_encode(&x, spec, Some(&ones)).unwrap()
        );
    }

    #[test]
    fn ctf_weight_endpoints_and_midpoint() {
        assert_eq!(ctf_weight(2, 6, 1.5).unwrap(), 0.0);
        assert_eq!(ctf_weight(2, 6, 3.0).unwrap(), 1.0);
        assert!((ctf_weight(2, 6, 2.5).unwrap() - 0.5).abs() < 1e-15);
        assert!(ctf_weight(6, 6, 0.0).is_err());
    }

    #[test]
    fn ctf_weight_monotone_on_grid() {
        for l in 0..6 {
            let mut prev = -1.0f64;
            for i in 0..=6000 {
                let alpha = i as f64 * 1e-3;
                let w = ctf_weight(l, 6, alpha).unwrap();
                assert!((0.0..=1.0).contains(&w));
                assert!(w >= prev - 1e-15, "band {l} not monotone at alpha {alpha}");
                prev = w;
            }
        }
    }

    #[test]
    fn ctf_alpha_values() {
        let s = CtfSchedule::new(6, 50_000).unwrap();
        assert_eq!(s.alpha(0), 0.0);
        assert_eq!(s.alpha(50_000), 6.0);
        assert_eq!(s.alpha(25_000), 3.0);
        assert!(CtfSchedule::new(6, 0).is_err());
    }

    #[test]
    fn past_horizon_equals_unweighted() {
        let s = CtfSchedule::new(6, 1000).unwrap();
        let spec = EncodingSpec::new(6).unwrap();
        let x = [0.4f64, 1.3, -2.2];
        for t in [1000u64, 1001, 5000] {
            let w: Vec<f64> = ctf_weights(6, s.alpha(t));
            assert_eq!(
                positional_encode(&x, spec, Some(&w)).unwrap(),
                positional_encode(&x, spec, None).unwrap()
            );
        }
    }

    #[test]
    fn encode_backward_matches_finite_difference() {
        let spec = EncodingSpec::new(4).unwrap();
        let x = [0.31f64, -0.77, 1.21];
        let w = ctf_weights(4, 2.3);
        let out = positional_encode(&x, spec, Some(&w)).unwrap();
        // arbitrary cotangent
        let g: Vec<f64> = (0..out.len()).map(|i| 0.1 + 0.03 * i as f64).collect();
        let gx = positional_encode_backward(&x, spec, Some(&w), &g);
        let h = 1e-6;
        for c in 0..3 {
            let mut xp = x;
            xp[c] += h;
            let mut xm = x;
            xm[c] -= h;
            let op = positional_encode(&xp, spec, Some(&w)).unwrap();
            let om = positional_encode(&xm, spec, Some(&w)).unwrap();
            let fd: f64 = op
                .iter()
                .zip(&om)
                .zip(&g)
                .map(|((p, m), gi)| gi * (p - m) / (2.0 * h))
                .sum();
            assert!((fd - gx[c]).abs() < 1e-6, "component {c}: {fd} vs {}", gx[c]);
        }
    }
}
