//! Adam training of the unrolled network, optionally jointly with the
//! dynamic mask net.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masks::{mask_probability_graph, normal_mask, random_mask, CodedMask, DynamicMaskParams};
use crate::nn::model::{dmdc_graph, init_dmdc, loss_graph, NetConfig, Sensing};
use crate::nn::params::{Graph, ModelParams};
use crate::nn::tape::Tensor;
use crate::optics::{derive_seed, rgb_project, CassiOperator, Dispersion, NoiseSpec};
use crate::parallel::{map_indexed, Execution};
use crate::spectral::{HyperspectralCube, SpectralResponse};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub halve_every: usize,
    pub batch: usize,
    pub seed: u64,
    /// Per-pixel weight of the sampling-rate penalty in dynamic-mask training.
    pub rate_weight: f64,
    /// Step-size multiplier for the mask net's weights.
    pub mask_lr_scale: f64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 20,
            halve_every: 50,
            batch: 1,
            seed: 0,
            rate_weight: 1.0,
            mask_lr_scale: 1.0,
            exec: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::param(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::param("beta1 and beta2 must lie in (0, 1)"));
        }
        if !(self.mask_lr_scale > 0.0) {
            return Err(Error::param("mask lr scale must be > 0"));
        }
        if !(self.rate_weight >= 0.0) {
            return Err(Error::param("rate weight must be ≥ 0"));
        }
        if self.halve_every == 0 || self.batch == 0 {
            return Err(Error::param("halve_every and batch must be ≥ 1"));
        }
        Ok(())
    }

    /// Step size for 1-based `epoch`: halved every `halve_every` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch.max(1) - 1) / self.halve_every;
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update at step size `lr`. Names absent from
/// `grads` are left untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, g) in grads {
        let e = params
            .entry_mut(name)
            .ok_or_else(|| Error::UnknownName(format!("parameter {name}")))?;
        if e.value.len() != g.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{name}: {} vs {}", e.value.len(), g.len()),
            ));
        }
        let lr = if name.starts_with("mask.") {
            lr * cfg.mask_lr_scale
        } else {
            lr
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let (mh, vh) = (m[i] / c1, v[i] / c2);
            e.value.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        e.grad.copy_from_slice(g);
    }
    // shrinkage thresholds stay nonnegative
    for (name, e) in params.iter_mut() {
        if name.ends_with("tau") {
            e.value.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(())
}

/// How each training scene gets its mask.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskPolicy {
    /// One fixed pattern for every scene.
    Fixed(CodedMask),
    /// A fresh Bernoulli(0.5) mask per scene and epoch.
    Random { seed: u64 },
    /// A fresh clipped-normal mask per scene and epoch.
    Normal { seed: u64 },
    /// Masks predicted from each scene's RGB image, trained jointly.
    Dynamic {
        template: CodedMask,
        params: DynamicMaskParams,
    },
}

/// Everything fixed about the simulated training data.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub scenes: &'a [HyperspectralCube],
    pub response: &'a SpectralResponse,
    pub dispersion: Dispersion,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-scene loss over the epoch.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Trained mask net, for the dynamic policy.
    pub mask: Option<DynamicMaskParams>,
    pub trace: Vec<EpochRecord>,
}

/// Loss and parameter gradients for one scene.
fn scene_grads(
    params: &ModelParams,
    data: &TrainData,
    policy: &MaskPolicy,
    net: &NetConfig,
    scene: usize,
    noise_seed: u64,
    rate_weight: f64,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let x = &data.scenes[scene];
    let (nx, ny, bands) = x.dims();
    let noise = NoiseSpec::new(data.sigma, noise_seed)?;
    let yr = rgb_project(x, data.response, &noise.derive(1))?;
    let mut g = Graph::new(params);
    let xt = g.constant(Tensor::new(vec![bands, nx, ny], x.data.clone())?);

    let (mask, mask_var) = match policy {
        MaskPolicy::Fixed(m) => (m.clone(), None),
        MaskPolicy::Random { seed } => (random_mask(nx, ny, derive_seed(*seed, noise_seed)), None),
        MaskPolicy::Normal { seed } => (normal_mask(nx, ny, derive_seed(*seed, noise_seed)), None),
        MaskPolicy::Dynamic { template, params: mp } => {
            let p = mask_probability_graph(&mut g, &yr, template, mp.channels)?;
            let keep = g.keep_below(p, mp.threshold);
            let keep = g.reshape(keep, &[nx, ny])?;
            let m = CodedMask {
                nx,
                ny,
                data: g.value(keep).data.clone(),
                binary: true,
            };
            (m, Some(keep))
        }
    };
    let op = CassiOperator::new(&mask, &data.dispersion, bands)?;
    let sensing = match mask_var {
        Some(keep) => Sensing::coupled(&mut g, &op, keep)?,
        None => Sensing::fixed(&op),
    };
    let mut n = vec![0.0; op.meas_len()];
    noise.derive(2).apply(&mut n);
    let noise_var = g.constant(Tensor::new(vec![nx, op.width], n)?);
    let clean = sensing.forward(&mut g, xt)?;
    let yc = g.add(clean, noise_var)?;
    let out = dmdc_graph(&mut g, yc, &yr, &sensing, data.response, net)?;
    let mut loss = loss_graph(&mut g, out, xt, &sensing, yc, net.xi)?;
    if let (Some(keep), MaskPolicy::Dynamic { template, .. }) = (mask_var, policy) {
        // hold the open fraction at the template's sampling rate
        let n = (nx * ny) as f64;
        let rate = template.data.iter().sum::<f64>() / n;
        let open = g.sum(keep);
        let open = g.scale(open, 1.0 / n);
        let target = g.constant(Tensor::scalar(-rate));
        let gap = g.add(open, target)?;
        let pen = g.sum_squares(gap);
        let pen = g.scale(pen, rate_weight * n);
        loss = g.add(loss, pen)?;
    }
    let grads = g.param_grads(loss)?;
    Ok((g.value(loss).data[0], grads))
}

/// Trains from fresh weights seeded by `train.seed`.
pub fn train_dmdc(data: &TrainData, policy: &MaskPolicy, net: &NetConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    let first = data
        .scenes
        .first()
        .ok_or_else(|| Error::param("training needs at least one scene"))?;
    let params = init_dmdc(first.bands, net, train.seed)?;
    train_from(params, data, policy, net, train)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: ModelParams,
    data: &TrainData,
    policy: &MaskPolicy,
    net: &NetConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    train.validate()?;
    net.validate()?;
    if data.scenes.is_empty() {
        return Err(Error::param("training needs at least one scene"));
    }
    let dims = data.scenes[0].dims();
    if data.scenes.iter().any(|s| s.dims() != dims) {
        return Err(Error::dim("train_dmdc", "scenes differ in size"));
    }
    let mut policy = policy.clone();
    if let MaskPolicy::Dynamic { params: mp, .. } = &policy {
        mp.validate()?;
        params.extend(mp.weights.clone());
    }
    let mut state = AdamState::default();
    let mut trace = Vec::with_capacity(train.epochs);
    let mut order: Vec<usize> = (0..data.scenes.len()).collect();
    for epoch in 1..=train.epochs {
        let lr = train.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch) {
            let results = map_indexed(train.exec, batch.len(), |i| {
                let s = batch[i];
                let noise_seed = derive_seed(train.seed, ((epoch as u64) << 32) | s as u64);
                scene_grads(&params, data, &policy, net, s, noise_seed, train.rate_weight)
            });
            // fixed-order reduction keeps runs bit-identical
            let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in results {
                let (loss, grads) = r?;
                total += loss;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let k = 1.0 / batch.len() as f64;
            sum.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= k));
            adam_step(&mut params, &sum, &mut state, lr, train)?;
        }
        trace.push(EpochRecord {
            epoch,
            loss: total / data.scenes.len() as f64,
            lr,
        });
    }
    let mask = match &mut policy {
        MaskPolicy::Dynamic { params: mp, .. } => {
            let trained = params.subset("mask.");
            for name in trained.names() {
                params.remove(name);
            }
            mp.weights = trained;
            Some(mp.clone())
        }
        _ => None,
    };
    Ok(TrainOutcome { params, mask, trace })
}
