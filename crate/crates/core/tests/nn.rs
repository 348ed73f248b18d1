mod common;

use std::collections::BTreeMap;

use common::*;
use dualcassi::estimation::{init_noise_estimator, noise_estimator_graph};
use dualcassi::eval::psnr;
use dualcassi::masks::template_mask;
use dualcassi::nn::blocks::{cross_ab, init_block, spatial_ab, spectral_ab};
use dualcassi::nn::model::{das_forward, dmdc_graph, loss_fn, rgb_init, sas_forward, Sensing};
use dualcassi::nn::train::{adam_step, AdamState};
use dualcassi::nn::{
    dmdc_forward, init_dmdc, train_dmdc, Graph, Init, MaskPolicy, ModelParams, NetConfig, Tensor, TrainConfig,
    TrainData,
};
use dualcassi::optics::{cassi_forward, rgb_project};
use dualcassi::spectral::{default_spectral_response, synth_scene};
use dualcassi::{CassiOperator, Dispersion, Execution, NoiseSpec, SceneSpec};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape.to_vec(), signed_vec(shape.iter().product(), seed)).unwrap()
}

fn block_params(prefix: &str, c: usize, seed: u64) -> ModelParams {
    let mut p = ModelParams::new();
    init_block(&mut p, prefix, c, &mut Init::new(seed)).unwrap();
    jitter(&mut p, seed + 1);
    p
}

#[test]
fn attention_blocks_pass_gradient_checks() {
    let p = block_params("b.", 8, 1);
    let w = subnet_worst(&p, &[tensor(&[16, 8], 2)], &|g, v| spectral_ab(g, v[0], "b.", 2));
    assert!(w < 1e-3, "spectral_ab {w}");
    let w = subnet_worst(&p, &[tensor(&[64, 8], 3)], &|g, v| {
        spatial_ab(g, v[0], 8, 8, 4, "b.", 2)
    });
    assert!(w < 1e-3, "spatial_ab {w}");
    let w = subnet_worst(&p, &[tensor(&[16, 8], 4), tensor(&[16, 8], 5)], &|g, v| {
        cross_ab(g, v[0], v[1], "b.", 2)
    });
    assert!(w < 1e-3, "cross_ab {w}");
}

#[test]
fn rgb_lift_and_noise_head_pass_gradient_checks() {
    let cfg = NetConfig {
        embed_dim: 8,
        window: 4,
        stages: 1,
        ..NetConfig::default()
    };
    let mut p = init_dmdc(8, &cfg, 6).unwrap().subset("rgb.");
    jitter(&mut p, 7);
    let w = subnet_worst(&p, &[tensor(&[3, 4, 4], 8)], &|g, v| rgb_init(g, v[0]));
    assert!(w < 1e-3, "rgb_init {w}");

    let mut p = ModelParams::new();
    init_noise_estimator(&mut p, "ne.", 4, &mut Init::new(9)).unwrap();
    jitter(&mut p, 10);
    let w = subnet_worst(&p, &[tensor(&[4, 4, 4], 11), tensor(&[4, 4, 4], 12)], &|g, v| {
        noise_estimator_graph(g, v[0], v[1], "ne.")
    });
    assert!(w < 1e-3, "noise estimator {w}");
}

#[test]
fn subnets_pass_gradient_checks() {
    let cfg = NetConfig {
        embed_dim: 8,
        window: 4,
        stages: 2,
        ..NetConfig::default()
    };
    let mut p = init_dmdc(8, &cfg, 13).unwrap();
    jitter(&mut p, 14);
    let das = p.subset("das.");
    let w = subnet_worst(&das, &[tensor(&[8, 8, 8], 15), tensor(&[8, 8, 8], 16)], &|g, v| {
        das_forward(g, v[0], Some(v[1]), &cfg)
    });
    assert!(w < 3e-3, "das {w}");
    let sas = p.subset("sas.");
    let w = subnet_worst(&sas, &[tensor(&[8, 8, 8], 17), tensor(&[8, 8, 8], 18)], &|g, v| {
        sas_forward(g, v[0], Some(v[1]), &cfg)
    });
    assert!(w < 3e-3, "sas {w}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let x = synth_scene(&SceneSpec {
        nx: 6,
        ny: 6,
        bands: 3,
        ..SceneSpec::with_seed(2)
    })
    .unwrap();
    let mask = template_mask(6, 6, 0.5, 1).unwrap();
    let d = Dispersion::Linear(1);
    let y = cassi_forward(&x, &mask, &d, &NoiseSpec::new(0.01, 3).unwrap()).unwrap();
    let out = random_cube(6, 6, 3, 4);
    let (_, grad) = loss_fn(&out, &x, &mask, &y, 0.5).unwrap();
    let f = |v: &[f64]| {
        let c = dualcassi::HyperspectralCube::from_vec(6, 6, 3, v.to_vec()).unwrap();
        loss_fn(&c, &x, &mask, &y, 0.5).unwrap().0
    };
    assert!(fd_worst(&f, &out.data, &grad, &sample_coords(out.data.len(), 40)) < 1e-3);
    // both terms vanish at the truth with a noiseless measurement
    let clean = cassi_forward(&x, &mask, &d, &NoiseSpec::NONE).unwrap();
    assert_eq!(loss_fn(&x, &x, &mask, &clean, 0.5).unwrap().0, 0.0);
}

#[test]
fn adam_matches_a_scalar_reference() {
    let cfg = TrainConfig::default();
    let mut p = ModelParams::new();
    p.insert("w", Tensor::new(vec![1], vec![0.3]).unwrap()).unwrap();
    let mut st = AdamState::default();
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![0.7]);
    adam_step(&mut p, &grads, &mut st, 0.01, &cfg).unwrap();
    adam_step(&mut p, &grads, &mut st, 0.01, &cfg).unwrap();
    // independent two-step update
    let (b1, b2, g, lr) = (0.9f64, 0.999f64, 0.7f64, 0.01f64);
    let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + 1e-8);
    }
    assert!((p.get("w").unwrap().data[0] - w).abs() < 1e-15);
}

#[test]
fn later_stages_share_weights_and_flags_shape_the_parameter_set() {
    let base = NetConfig {
        embed_dim: 8,
        window: 4,
        ..NetConfig::default()
    };
    let two = init_dmdc(
        4,
        &NetConfig {
            stages: 2,
            ..base.clone()
        },
        0,
    )
    .unwrap();
    let five = init_dmdc(
        4,
        &NetConfig {
            stages: 5,
            ..base.clone()
        },
        0,
    )
    .unwrap();
    assert_eq!(two.names().collect::<Vec<_>>(), five.names().collect::<Vec<_>>());

    // a five-stage graph reads exactly the stored entries
    let x = synth_scene(&SceneSpec {
        nx: 8,
        ny: 8,
        bands: 4,
        ..SceneSpec::with_seed(1)
    })
    .unwrap();
    let mask = template_mask(8, 8, 0.5, 0).unwrap();
    let resp = default_spectral_response(4).unwrap();
    let d = Dispersion::Linear(1);
    let yc = cassi_forward(&x, &mask, &d, &NoiseSpec::NONE).unwrap();
    let yr = rgb_project(&x, &resp, &NoiseSpec::NONE).unwrap();
    let op = CassiOperator::new(&mask, &d, 4).unwrap();
    let mut g = Graph::new(&five);
    let y = g.constant(Tensor::new(vec![8, yc.width], yc.data.clone()).unwrap());
    dmdc_graph(
        &mut g,
        y,
        &yr,
        &Sensing::fixed(&op),
        &resp,
        &NetConfig {
            stages: 5,
            ..base.clone()
        },
    )
    .unwrap();
    let used: Vec<&str> = g.used().collect();
    assert_eq!(used.len(), five.len());

    let no_cross = init_dmdc(
        4,
        &NetConfig {
            with_cross_attention: false,
            ..base.clone()
        },
        0,
    )
    .unwrap();
    assert!(no_cross.count() < two.count());
    assert!(no_cross.names().all(|n| two.contains(n)));
}

fn small_data(seeds: std::ops::Range<u64>) -> Vec<dualcassi::HyperspectralCube> {
    seeds
        .map(|s| {
            synth_scene(&SceneSpec {
                nx: 16,
                ny: 16,
                bands: 4,
                ..SceneSpec::with_seed(s)
            })
            .unwrap()
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_schedule_exact() {
    let scenes = small_data(10..13);
    let resp = default_spectral_response(4).unwrap();
    let data = TrainData {
        scenes: &scenes,
        response: &resp,
        dispersion: Dispersion::Linear(1),
        sigma: 0.01,
    };
    let net = NetConfig {
        embed_dim: 8,
        stages: 1,
        ..NetConfig::default()
    };
    let tc = TrainConfig {
        epochs: 3,
        halve_every: 2,
        batch: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let policy = MaskPolicy::Random { seed: 1 };
    let a = train_dmdc(&data, &policy, &net, &tc).unwrap();
    let b = train_dmdc(
        &data,
        &policy,
        &net,
        &TrainConfig {
            exec: Execution::Sequential,
            ..tc.clone()
        },
    )
    .unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.params, b.params);
    let lrs: Vec<f64> = a.trace.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![4e-4, 4e-4, 2e-4]);
}

#[test]
fn training_improves_on_a_held_out_scene() {
    let scenes = small_data(20..26);
    let resp = default_spectral_response(4).unwrap();
    let d = Dispersion::Linear(1);
    let data = TrainData {
        scenes: &scenes,
        response: &resp,
        dispersion: d.clone(),
        sigma: 0.0,
    };
    let mask = template_mask(16, 16, 0.5, 0).unwrap();
    let net = NetConfig {
        embed_dim: 8,
        stages: 1,
        ..NetConfig::default()
    };
    let tc = TrainConfig {
        epochs: 12,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let untrained = init_dmdc(4, &net, tc.seed).unwrap();
    let trained = train_dmdc(&data, &MaskPolicy::Fixed(mask.clone()), &net, &tc).unwrap();
    let x = small_data(99..100).pop().unwrap();
    let yc = cassi_forward(&x, &mask, &d, &NoiseSpec::NONE).unwrap();
    let yr = rgb_project(&x, &resp, &NoiseSpec::NONE).unwrap();
    let before = psnr(&dmdc_forward(&yc, &yr, &mask, &resp, &untrained, &net).unwrap(), &x).unwrap();
    let after = psnr(
        &dmdc_forward(&yc, &yr, &mask, &resp, &trained.params, &net).unwrap(),
        &x,
    )
    .unwrap();
    assert!(after > before, "untrained {before:.2} dB, trained {after:.2} dB");
}

#[test]
fn dynamic_training_returns_a_mask_net() {
    let scenes = small_data(30..32);
    let resp = default_spectral_response(4).unwrap();
    let data = TrainData {
        scenes: &scenes,
        response: &resp,
        dispersion: Dispersion::Linear(1),
        sigma: 0.0,
    };
    let template = template_mask(16, 16, 0.5, 0).unwrap();
    let mp = dualcassi::DynamicMaskParams::init(4, 0.5, 1).unwrap();
    let net = NetConfig {
        embed_dim: 8,
        stages: 1,
        ..NetConfig::default()
    };
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train_dmdc(
        &data,
        &MaskPolicy::Dynamic {
            template,
            params: mp.clone(),
        },
        &net,
        &tc,
    )
    .unwrap();
    let trained = out.mask.expect("mask net");
    assert!(out.params.names().all(|n| !n.starts_with("mask.")));
    assert_eq!(
        trained.weights.names().collect::<Vec<_>>(),
        mp.weights.names().collect::<Vec<_>>()
    );
    assert_ne!(trained.weights, mp.weights);
}
