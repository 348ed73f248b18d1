//! Ablation and mask-type benchmark: every (scene seed, suite entry) pair is
//! synthesised, measured, reconstructed and scored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::metrics::{mrae, psnr_capped, rmse, ssim};
use crate::masks::{dynamic_mask, normal_mask, random_mask, template_mask, CodedMask, DynamicMaskParams};
use crate::nn::model::{dmdc_forward, NetConfig};
use crate::nn::params::ModelParams;
use crate::optics::{cassi_forward, derive_seed, rgb_project, Dispersion, NoiseSpec};
use crate::parallel::{map_indexed, Execution};
use crate::recon::{reconstruct_classical, ReconConfig};
use crate::spectral::{synth_scene, HyperspectralCube, SceneSpec, SpectralResponse};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaskType {
    Manual,
    Random,
    Normal,
    Dynamic,
}

impl MaskType {
    pub const ALL: [MaskType; 4] = [MaskType::Manual, MaskType::Random, MaskType::Normal, MaskType::Dynamic];

    pub fn name(self) -> &'static str {
        match self {
            MaskType::Manual => "manual",
            MaskType::Random => "rand",
            MaskType::Normal => "normal",
            MaskType::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for MaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MaskType::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownName(format!("mask type {s:?} (expected manual, rand, normal or dynamic)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Classical,
    Dmdc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Classical => "classical",
            Method::Dmdc => "dmdc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(Method::Classical),
            "dmdc" => Ok(Method::Dmdc),
            _ => Err(Error::UnknownName(format!("method {s:?} (expected classical or dmdc)"))),
        }
    }
}

/// One configuration of the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteEntry {
    pub mask: MaskType,
    pub method: Method,
    pub stages: usize,
    pub use_rgb: bool,
    pub use_ne: bool,
    pub use_cross: bool,
}

impl SuiteEntry {
    pub fn new(mask: MaskType, method: Method, stages: usize) -> Self {
        SuiteEntry {
            mask,
            method,
            stages,
            use_rgb: true,
            use_ne: false,
            use_cross: true,
        }
    }
}

/// Suite definition plus the trained weights it needs.
#[derive(Clone, Debug)]
pub struct Suite {
    pub scene_seeds: Vec<u64>,
    /// Scene size and generator settings; the seed is replaced per scene.
    pub scene: SceneSpec,
    pub response: SpectralResponse,
    pub dispersion: Dispersion,
    pub sigma: f64,
    /// Seed of the manual template, which also conditions the dynamic net.
    pub mask_seed: u64,
    pub entries: Vec<SuiteEntry>,
    pub recon: ReconConfig,
    pub net: NetConfig,
    /// Network weights per mask type, for the `dmdc` method.
    pub models: BTreeMap<MaskType, ModelParams>,
    pub mask_net: Option<DynamicMaskParams>,
    pub exec: Execution,
}

/// One scored reconstruction, or an aggregate when `scene_seed` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scene_seed: Option<u64>,
    pub entry: SuiteEntry,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mrae: f64,
    pub rmse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Per-scene rows in suite order: entries outer, seeds inner.
    pub rows: Vec<ReportRow>,
    /// Means per entry, in entry order.
    pub aggregates: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str =
    "scene_seed,mask_type,method,stages,use_rgb,use_ne,use_cross,psnr_db,ssim,mrae,rmse,seconds";

impl MetricReport {
    pub fn aggregate(&self, entry: &SuiteEntry) -> Option<&ReportRow> {
        self.aggregates.iter().find(|r| r.entry == *entry)
    }

    /// Scenes per second of reconstruction for `entry`.
    pub fn fps(&self, entry: &SuiteEntry) -> Option<f64> {
        let secs: f64 = self.rows.iter().filter(|r| r.entry == *entry).map(|r| r.seconds).sum();
        let n = self.rows.iter().filter(|r| r.entry == *entry).count();
        (secs > 0.0).then(|| n as f64 / secs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in self.rows.iter().chain(&self.aggregates) {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }
}

impl ReportRow {
    fn csv_line(&self) -> String {
        let e = &self.entry;
        let seed = self.scene_seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        format!(
            "{seed},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            e.mask,
            e.method,
            e.stages,
            e.use_rgb as u8,
            e.use_ne as u8,
            e.use_cross as u8,
            self.psnr_db,
            self.ssim,
            self.mrae,
            self.rmse,
            self.seconds
        )
    }
}

impl Suite {
    pub fn validate(&self) -> Result<()> {
        if self.scene_seeds.is_empty() || self.entries.is_empty() {
            return Err(Error::param("benchmark needs at least one seed and one entry"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::param("sigma must be ≥ 0"));
        }
        if self.response.bands != self.scene.bands {
            return Err(Error::dim("run_benchmark", "response and scene band counts differ"));
        }
        for e in &self.entries {
            if e.stages == 0 {
                return Err(Error::param("stages must be ≥ 1"));
            }
            if e.mask == MaskType::Dynamic && self.mask_net.is_none() {
                return Err(Error::param("dynamic mask requires mask-net weights"));
            }
            if e.method == Method::Dmdc && !self.models.contains_key(&e.mask) {
                return Err(Error::param(format!("no dmdc weights for mask type {}", e.mask)));
            }
        }
        Ok(())
    }

    fn mask_for(
        &self,
        kind: MaskType,
        template: &CodedMask,
        rgb: &crate::spectral::RgbImage,
        seed: u64,
    ) -> Result<CodedMask> {
        let (nx, ny) = (self.scene.nx, self.scene.ny);
        let s = derive_seed(self.mask_seed, seed);
        Ok(match kind {
            MaskType::Manual => template.clone(),
            MaskType::Random => random_mask(nx, ny, s),
            MaskType::Normal => normal_mask(nx, ny, s),
            MaskType::Dynamic => {
                let net = self
                    .mask_net
                    .as_ref()
                    .ok_or_else(|| Error::param("dynamic mask requires mask-net weights"))?;
                dynamic_mask(rgb, template, net)?
            }
        })
    }

    fn run_one(
        &self,
        entry: &SuiteEntry,
        seed: u64,
        truth: &HyperspectralCube,
        template: &CodedMask,
    ) -> Result<ReportRow> {
        let noise = NoiseSpec::new(self.sigma, seed)?;
        let yr = rgb_project(truth, &self.response, &noise.derive(1))?;
        let mask = self.mask_for(entry.mask, template, &yr, seed)?;
        let yc = cassi_forward(truth, &mask, &self.dispersion, &noise.derive(2))?;
        let start = Instant::now();
        let out = match entry.method {
            Method::Classical => {
                let cfg = ReconConfig {
                    stages: entry.stages,
                    use_rgb: entry.use_rgb,
                    use_noise_estimate: entry.use_ne,
                    ..self.recon.clone()
                };
                reconstruct_classical(&yc, &yr, &mask, &self.response, &cfg)?
            }
            Method::Dmdc => {
                let cfg = NetConfig {
                    stages: entry.stages,
                    with_rgb: entry.use_rgb,
                    with_noise_estimator: entry.use_ne,
                    with_cross_attention: entry.use_cross,
                    ..self.net.clone()
                };
                let params = &self.models[&entry.mask];
                dmdc_forward(&yc, &yr, &mask, &self.response, params, &cfg)?
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        Ok(ReportRow {
            scene_seed: Some(seed),
            entry: *entry,
            psnr_db: psnr_capped(&out, truth)?,
            ssim: ssim(&out, truth)?,
            mrae: mrae(&out, truth)?,
            rmse: rmse(&out, truth)?,
            seconds,
        })
    }
}

/// Runs every entry on every seed. Metric columns are deterministic; only
/// `seconds` varies between runs.
pub fn run_benchmark(suite: &Suite) -> Result<MetricReport> {
    suite.validate()?;
    let template = template_mask(suite.scene.nx, suite.scene.ny, 0.5, suite.mask_seed)?;
    let scenes: Vec<HyperspectralCube> = suite
        .scene_seeds
        .iter()
        .map(|&s| {
            synth_scene(&SceneSpec {
                seed: s,
                ..suite.scene.clone()
            })
        })
        .collect::<Result<_>>()?;
    let ns = scenes.len();
    let rows = map_indexed(suite.exec, suite.entries.len() * ns, |k| {
        let (e, s) = (k / ns, k % ns);
        suite.run_one(&suite.entries[e], suite.scene_seeds[s], &scenes[s], &template)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let aggregates = suite
        .entries
        .iter()
        .enumerate()
        .map(|(e, entry)| {
            let group = &rows[e * ns..(e + 1) * ns];
            let mean = |f: fn(&ReportRow) -> f64| group.iter().map(f).sum::<f64>() / ns as f64;
            ReportRow {
                scene_seed: None,
                entry: *entry,
                psnr_db: mean(|r| r.psnr_db),
                ssim: mean(|r| r.ssim),
                mrae: mean(|r| r.mrae),
                rmse: mean(|r| r.rmse),
                seconds: mean(|r| r.seconds),
            }
        })
        .collect();
    Ok(MetricReport { rows, aggregates })
}

/// Throughput of a single-scene workload: one warmup call, then the median
/// of five timed calls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FpsReport {
    pub median_seconds: f64,
    pub fps: f64,
}

pub fn measure_fps<T>(mut run: impl FnMut() -> Result<T>) -> Result<FpsReport> {
    run()?;
    let mut times = Vec::with_capacity(5);
    for _ in 0..5 {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = times[2].max(f64::MIN_POSITIVE);
    Ok(FpsReport {
        median_seconds: median,
        fps: 1.0 / median,
    })
}
