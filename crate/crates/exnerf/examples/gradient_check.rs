//! Compare the analytic gradient of a full two-pass ray render against
//! central finite differences in double precision.

use exnerf::field::{
    composite, deform_points, field_pass, render_ray, render_ray_backward, Conditioning,
    FieldParameters, ModelSpec, RenderSettings,
};
use exnerf::{APPEARANCE_CODE_DIM, DEFORM_CODE_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> exnerf::Result<()> {
    let spec = ModelSpec {
        trunk_width: 16,
        trunk_depth: 3,
        trunk_skip: Some(1),
        color_hidden: 8,
        deform_width: 8,
        deform_depth: 2,
        ..ModelSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = FieldParameters::<f64>::init(spec, 1, &mut rng)?;
    for v in &mut params.latents.deform {
        *v = 0.1;
    }
    // nudge the deformation output layer off its zero initialization so the
    // warp actually participates
    for w in &mut params.deform.layers.last_mut().unwrap().w {
        *w = rng.gen_range(-0.05..0.05);
    }

    let beta = vec![0.02; exnerf::BETA_DIM];
    let settings = RenderSettings {
        n_coarse: 8,
        n_fine: 6,
        jitter: false,
        background: [0.1; 3],
    };
    let origin = [0.0, 0.0, 1.5];
    let dir = [0.03, -0.01, -1.0];
    let dcolor = [1.0, 1.0, 1.0];

    let omega = params.latents.lookup_deform(0).to_vec();
    let phi = params.latents.lookup_appearance(0).to_vec();
    let cond = Conditioning {
        omega: &omega,
        phi: &phi,
        beta_gated: &beta,
        band_weights: None,
    };
    let mut ray_rng = exnerf::camera::ray_rng(0, 0, 0);
    let fwd = render_ray(&params, origin, dir, 0.3, 2.5, &cond, &settings, &mut ray_rng)?;
    let mut grads = params.zeros_like();
    let mut og = vec![0.0; DEFORM_CODE_DIM];
    let mut pg = vec![0.0; APPEARANCE_CODE_DIM];
    render_ray_backward(&params, &fwd, settings.background, [0.0; 3], dcolor, &mut grads, &mut og, &mut pg)?;

    // brightness of the fine pass as the probed scalar; the fine sample
    // positions are held fixed because the reverse pass treats the
    // importance-sample placement as constant
    let ts_fine = fwd.ts_fine.clone();
    let loss = |p: &FieldParameters<f64>| -> f64 {
        let omega = p.latents.lookup_deform(0).to_vec();
        let phi = p.latents.lookup_appearance(0).to_vec();
        let xs: Vec<[f64; 3]> = ts_fine
            .iter()
            .map(|&t| [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]])
            .collect();
        let (warped, _) = deform_points(&p.deform, &spec, &xs, &omega, None).unwrap();
        let (out, _) = field_pass(&p.fine, &spec, &warped, &dir, &phi, &beta).unwrap();
        let comp = composite(&ts_fine, 2.5, &out.sigmas, &out.rgbs, settings.background).unwrap();
        comp.color.iter().sum()
    };

    let flat = params.flatten();
    let gflat = grads.flatten();
    let mut check_rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    println!("{:<24} {:>14} {:>14} {:>10}", "parameter", "analytic", "numeric", "rel err");
    for (name, _, range) in params.entries() {
        // the scalar only touches the fine net, the warp, and frame 0's codes
        if name.starts_with("coarse") {
            continue;
        }
        let idx = range.start + check_rng.gen_range(0..range.len());
        let h = 1e-6;
        let mut fp = flat.clone();
        fp[idx] += h;
        let mut pp = params.clone();
        pp.load_flat(&fp)?;
        let up = loss(&pp);
        fp[idx] -= 2.0 * h;
        pp.load_flat(&fp)?;
        let dn = loss(&pp);
        let fd = (up - dn) / (2.0 * h);
        let mut an = gflat[idx];
        if name == "latents.deform" {
            an += og[idx - range.start];
        }
        if name == "latents.appearance" {
            an += pg[idx - range.start];
        }
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
        worst = worst.max(rel);
        println!("{name:<24} {an:>14.8} {fd:>14.8} {rel:>10.2e}");
    }
    println!("worst relative error: {worst:.2e}");
    Ok(())
}
