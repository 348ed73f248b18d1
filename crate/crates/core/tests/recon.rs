mod common;

use common::*;
use dualcassi::estimation::backproject_cassi;
use dualcassi::eval::psnr;
use dualcassi::masks::template_mask;
use dualcassi::optics::dual_measure;
use dualcassi::recon::{classical_stage, reconstruct_classical, tv_denoise_plane, ClassicalProblem, ReconConfig};
use dualcassi::spectral::{default_spectral_response, synth_scene};
use dualcassi::{Dispersion, Execution, NoiseSpec, SceneSpec};

fn tv(u: &[f64], nx: usize, ny: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let k = i * ny + j;
            let gx = if i + 1 < nx { u[k + ny] - u[k] } else { 0.0 };
            let gy = if j + 1 < ny { u[k + 1] - u[k] } else { 0.0 };
            s += (gx * gx + gy * gy).sqrt();
        }
    }
    s
}

#[test]
fn tv_step_lowers_its_objective() {
    let (nx, ny) = (12, 10);
    let f = uniform_vec(nx * ny, 5);
    for w in [0.02, 0.1, 0.5] {
        let u = tv_denoise_plane(&f, nx, ny, w, 60);
        let obj = |u: &[f64]| 0.5 * u.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + w * tv(u, nx, ny);
        assert!(obj(&u) < obj(&f), "weight {w}");
        assert!(tv(&u, nx, ny) < tv(&f, nx, ny));
        // the dual update keeps the mean
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&u) - mean(&f)).abs() < 1e-3);
    }
}

#[test]
fn truth_is_a_fixed_point_without_the_rgb_anchor() {
    let x = synth_scene(&SceneSpec {
        nx: 16,
        ny: 16,
        bands: 6,
        ..SceneSpec::with_seed(3)
    })
    .unwrap();
    let mask = template_mask(16, 16, 0.5, 1).unwrap();
    let resp = default_spectral_response(6).unwrap();
    let (yr, yc) = dual_measure(&x, &mask, &resp, &Dispersion::Linear(1), &NoiseSpec::NONE).unwrap();
    let cfg = ReconConfig {
        use_rgb: false,
        ..ReconConfig::default()
    };
    let next = classical_stage(&x, &yc, &yr, None, &mask, &resp, &cfg).unwrap();
    let worst = next
        .data
        .iter()
        .zip(&x.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "moved by {worst}");
}

#[test]
fn initial_estimate_is_the_normalised_back_projection() {
    let x = synth_scene(&SceneSpec {
        nx: 8,
        ny: 8,
        bands: 4,
        ..SceneSpec::with_seed(1)
    })
    .unwrap();
    let mask = template_mask(8, 8, 0.5, 2).unwrap();
    let resp = default_spectral_response(4).unwrap();
    let (yr, yc) = dual_measure(&x, &mask, &resp, &Dispersion::Linear(1), &NoiseSpec::NONE).unwrap();
    let cfg = ReconConfig::default();
    let p = ClassicalProblem::new(&yc, &yr, &mask, &resp, None, &cfg).unwrap();
    assert_eq!(p.initial(), backproject_cassi(&yc, &mask).unwrap());
    assert!(p.step() > 0.0);
}

#[test]
fn stages_improve_on_the_back_projection_and_fit_the_data() {
    let x = synth_scene(&SceneSpec {
        nx: 24,
        ny: 24,
        bands: 6,
        ..SceneSpec::with_seed(7)
    })
    .unwrap();
    let mask = template_mask(24, 24, 0.5, 0).unwrap();
    let resp = default_spectral_response(6).unwrap();
    let (yr, yc) = dual_measure(&x, &mask, &resp, &Dispersion::Linear(1), &NoiseSpec::NONE).unwrap();
    let cfg = ReconConfig {
        stages: 20,
        ..ReconConfig::default()
    };
    let p = ClassicalProblem::new(&yc, &yr, &mask, &resp, None, &cfg).unwrap();
    let x0 = p.initial();
    let rec = reconstruct_classical(&yc, &yr, &mask, &resp, &cfg).unwrap();
    assert!(psnr(&rec, &x).unwrap() > psnr(&x0, &x).unwrap() + 3.0);
    assert!(rec.data.iter().all(|v| (0.0..=1.0).contains(v)));
    // without the RGB pull the iteration only descends the data term
    let plain = ReconConfig {
        use_rgb: false,
        ..cfg.clone()
    };
    let rec = reconstruct_classical(&yc, &yr, &mask, &resp, &plain).unwrap();
    assert!(p.fidelity(&rec) < p.fidelity(&x0));
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let x = synth_scene(&SceneSpec {
        nx: 16,
        ny: 16,
        bands: 4,
        ..SceneSpec::with_seed(2)
    })
    .unwrap();
    let mask = template_mask(16, 16, 0.5, 3).unwrap();
    let resp = default_spectral_response(4).unwrap();
    let (yr, yc) = dual_measure(
        &x,
        &mask,
        &resp,
        &Dispersion::Linear(2),
        &NoiseSpec::new(0.01, 1).unwrap(),
    )
    .unwrap();
    let par = ReconConfig {
        stages: 5,
        use_noise_estimate: true,
        ..ReconConfig::default()
    };
    let seq = ReconConfig {
        exec: Execution::Sequential,
        ..par.clone()
    };
    assert_eq!(
        reconstruct_classical(&yc, &yr, &mask, &resp, &par).unwrap(),
        reconstruct_classical(&yc, &yr, &mask, &resp, &seq).unwrap()
    );
}

#[test]
fn invalid_configs_and_shapes_are_rejected() {
    let x = synth_scene(&SceneSpec {
        nx: 8,
        ny: 8,
        bands: 4,
        ..SceneSpec::with_seed(2)
    })
    .unwrap();
    let mask = template_mask(8, 8, 0.5, 3).unwrap();
    let resp = default_spectral_response(4).unwrap();
    let (yr, yc) = dual_measure(&x, &mask, &resp, &Dispersion::Linear(1), &NoiseSpec::NONE).unwrap();
    for cfg in [
        ReconConfig {
            stages: 0,
            ..ReconConfig::default()
        },
        ReconConfig {
            tv_weight: 0.0,
            ..ReconConfig::default()
        },
        ReconConfig {
            step_size: Some(-1.0),
            ..ReconConfig::default()
        },
    ] {
        assert!(reconstruct_classical(&yc, &yr, &mask, &resp, &cfg).is_err());
    }
    let other = template_mask(8, 9, 0.5, 3).unwrap();
    assert!(reconstruct_classical(&yc, &yr, &other, &resp, &ReconConfig::default()).is_err());
}
