//! Finite-difference gradient checking for unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::nn::tape::{Tape, Tensor, Var};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 1.0).unwrap();
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| d.sample(&mut rng)).collect(),
    }
}

/// Builds `f` on random inputs of the given shapes and compares every input
/// gradient against central differences.
pub fn check_gradients<F>(shapes: &[&[usize]], seed: u64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random_tensor(s, seed * 1000 + i as u64))
        .collect();
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vars).unwrap();
        t.value(out).data[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = f(&mut t, &vars).unwrap();
    let grads = t.backward(out).unwrap();
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data[i] += h;
            let mut minus = inputs.clone();
            minus[k].data[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(err < 1e-3, "input {k} element {i}: analytic {a}, numeric {numeric}");
        }
    }
}
