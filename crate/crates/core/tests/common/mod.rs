//! Reference implementations used as oracles by the integration tests and
//! the acceptance harness. Nothing here calls the library's own numerics.
#![allow(dead_code)]

use dualcassi::nn::{Graph, Init, ModelParams, Tape, Tensor, Var};
use dualcassi::{CodedMask, HyperspectralCube};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random::<f64>()).collect()
}

pub fn signed_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
}

pub fn random_cube(nx: usize, ny: usize, bands: usize, seed: u64) -> HyperspectralCube {
    HyperspectralCube::from_vec(nx, ny, bands, uniform_vec(nx * ny * bands, seed)).unwrap()
}

pub fn random_binary_mask(nx: usize, ny: usize, seed: u64) -> CodedMask {
    let mut r = rng(seed);
    let data = (0..nx * ny)
        .map(|_| if r.random::<bool>() { 1.0 } else { 0.0 })
        .collect();
    CodedMask::from_vec(nx, ny, data).unwrap()
}

/// Φ written out entry by entry from `Y(i, j + d·b) = ½ M(i, j) X_b(i, j)`.
/// Rows index `i·W + col`, columns index `b·nx·ny + i·ny + j`.
pub fn formula_matrix(mask: &CodedMask, d: usize, bands: usize) -> (usize, usize, Vec<f64>) {
    let (nx, ny) = (mask.nx, mask.ny);
    let w = ny + d * (bands - 1);
    let (rows, cols) = (nx * w, nx * ny * bands);
    let mut a = vec![0.0; rows * cols];
    for b in 0..bands {
        for i in 0..nx {
            for j in 0..ny {
                let col = b * nx * ny + i * ny + j;
                let row = i * w + j + d * b;
                a[row * cols + col] += 0.5 * mask.data[i * ny + j];
            }
        }
    }
    (rows, cols, a)
}

pub fn mat_vec(rows: usize, cols: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| a[r * cols + c] * x[c]).sum())
        .collect()
}

pub fn mat_t_vec(rows: usize, cols: usize, a: &[f64], y: &[f64]) -> Vec<f64> {
    (0..cols)
        .map(|c| (0..rows).map(|r| a[r * cols + c] * y[r]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = norm(b).max(1e-300);
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / scale
}

pub fn psnr_ref(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

pub fn mrae_ref(pred: &[f64], truth: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if *t >= 1e-4 {
            s += ((p - t) / t).abs();
            n += 1;
        }
    }
    s / n as f64
}

/// Worst relative error of an analytic gradient against central
/// differences of `f`, checked at the listed coordinates.
pub fn fd_worst(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize]) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut p = x.to_vec();
        p[i] += h;
        let mut m = x.to_vec();
        m[i] -= h;
        let num = (f(&p) - f(&m)) / (2.0 * h);
        let err = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

/// Up to `k` spread-out coordinates of a length-`n` vector.
pub fn sample_coords(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..k).map(|i| i * (n - 1) / (k - 1)).collect();
    v.dedup();
    v
}

/// Adds small noise to every parameter so no layer norm sees a constant
/// token and no activation sits exactly at a kink.
pub fn jitter(params: &mut ModelParams, seed: u64) {
    let mut init = Init::new(seed);
    for (_, e) in params.iter_mut() {
        let j = init.normal(&e.value.shape, 0.05);
        e.value.data.iter_mut().zip(&j.data).for_each(|(v, d)| *v += d);
    }
}

/// Gradient check of a subnet: scalar `Σ w ⊙ out` with fixed random `w`,
/// differentiated against every input and a sample of each parameter.
/// Returns the worst relative error.
pub fn subnet_worst(
    params: &ModelParams,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> dualcassi::Result<Var>,
) -> f64 {
    let eval = |params: &ModelParams, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let w = signed_vec(g.value(out).len(), 4242);
        dot(&g.value(out).data, &w)
    };
    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let w = Tensor::new(g.value(out).shape.clone(), signed_vec(g.value(out).len(), 4242)).unwrap();
    let wv = g.constant(w);
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    let pgrads = g.param_grads(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let gx = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let f = |x: &[f64]| {
            let mut ins = inputs.to_vec();
            ins[k].data = x.to_vec();
            eval(params, &ins)
        };
        worst = worst.max(fd_worst(&f, &inputs[k].data, &gx, &sample_coords(gx.len(), 12)));
    }
    for (name, gp) in &pgrads {
        let base = params.get(name).unwrap().data.clone();
        let f = |x: &[f64]| {
            let mut p = params.clone();
            p.entry_mut(name).unwrap().value.data = x.to_vec();
            eval(&p, inputs)
        };
        worst = worst.max(fd_worst(&f, &base, gp, &sample_coords(gp.len(), 4)));
    }
    worst
}

/// Gradient check of a raw tape expression on random leaves of the given
/// shapes, through the scalar `Σ w ⊙ out`. Every input coordinate is checked.
pub fn tape_worst(shapes: &[&[usize]], seed: u64, build: &dyn Fn(&mut Tape, &[Var]) -> dualcassi::Result<Var>) -> f64 {
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Tensor::new(s.to_vec(), signed_vec(s.iter().product(), seed * 100 + i as u64)).unwrap())
        .collect();
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars).unwrap();
        dot(&t.value(out).data, &signed_vec(t.value(out).len(), 777))
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = build(&mut t, &vars).unwrap();
    let w = Tensor::new(t.value(out).shape.clone(), signed_vec(t.value(out).len(), 777)).unwrap();
    let wv = t.leaf(w);
    let prod = t.mul(out, wv).unwrap();
    let loss = t.sum(prod);
    let grads = t.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let gx = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let f = |x: &[f64]| {
            let mut ins = inputs.to_vec();
            ins[k].data = x.to_vec();
            eval(&ins)
        };
        worst = worst.max(fd_worst(&f, &inputs[k].data, &gx, &(0..gx.len()).collect::<Vec<_>>()));
    }
    worst
}
