//! Training-free reconstruction: each stage back-projects the measurement
//! residual, adds an RGB anchor and smooths the increment with spatial
//! total variation.

use crate::error::{Error, Result};
use crate::estimation::{estimate_noise_analytic, CassiBackprojector, NoiseMap, RgbBackprojector};
use crate::masks::CodedMask;
use crate::optics::{CassiMeasurement, CassiOperator};
use crate::parallel::{map_indexed, Execution};
use crate::spectral::{HyperspectralCube, RgbImage, SpectralResponse};

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub stages: usize,
    pub tv_weight: f64,
    pub tv_iters: usize,
    /// Gradient step; `None` uses `1 / max diag(Φ Φᵀ)`.
    pub step_size: Option<f64>,
    pub use_noise_estimate: bool,
    pub use_rgb: bool,
    /// Weight β of the pull towards the RGB back-projection.
    pub rgb_weight: f64,
    pub exec: Execution,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            stages: 30,
            tv_weight: 1e-3,
            tv_iters: 20,
            step_size: None,
            use_noise_estimate: false,
            use_rgb: true,
            rgb_weight: 0.5,
            exec: Execution::Parallel,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::param("stages must be ≥ 1"));
        }
        if !(self.tv_weight > 0.0) || self.tv_iters == 0 {
            return Err(Error::param("tv weight must be > 0 and tv iterations ≥ 1"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param(format!("step size must be > 0, got {s}")));
            }
        }
        if !(self.rgb_weight >= 0.0) {
            return Err(Error::param("rgb weight must be ≥ 0"));
        }
        Ok(())
    }
}

/// Chambolle's dual projection for `argmin ½‖u − f‖² + w·TV(u)` on one
/// `nx × ny` plane, clamped to the input range.
pub fn tv_denoise_plane(f: &[f64], nx: usize, ny: usize, weight: f64, iters: usize) -> Vec<f64> {
    let n = nx * ny;
    let (lo, hi) = f
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if n == 0 || lo == hi {
        return f.to_vec();
    }
    const TAU: f64 = 0.125;
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    let mut div = vec![0.0; n];
    let divergence = |px: &[f64], py: &[f64], div: &mut [f64]| {
        for i in 0..nx {
            for j in 0..ny {
                let k = i * ny + j;
                let dx = if i == 0 {
                    px[k]
                } else if i == nx - 1 {
                    -px[k - ny]
                } else {
                    px[k] - px[k - ny]
                };
                let dy = if j == 0 {
                    py[k]
                } else if j == ny - 1 {
                    -py[k - 1]
                } else {
                    py[k] - py[k - 1]
                };
                div[k] = dx + dy;
            }
        }
    };
    let mut v = vec![0.0; n];
    for _ in 0..iters {
        divergence(&px, &py, &mut div);
        for k in 0..n {
            v[k] = div[k] - f[k] / weight;
        }
        for i in 0..nx {
            for j in 0..ny {
                let k = i * ny + j;
                let gx = if i + 1 < nx { v[k + ny] - v[k] } else { 0.0 };
                let gy = if j + 1 < ny { v[k + 1] - v[k] } else { 0.0 };
                let norm = 1.0 + TAU * (gx * gx + gy * gy).sqrt();
                px[k] = (px[k] + TAU * gx) / norm;
                py[k] = (py[k] + TAU * gy) / norm;
            }
        }
    }
    divergence(&px, &py, &mut div);
    f.iter()
        .zip(&div)
        .map(|(f, d)| (f - weight * d).clamp(lo, hi))
        .collect()
}

/// Band-wise spatial TV denoising.
pub fn tv_denoise(cube: &HyperspectralCube, weight: f64, iters: usize) -> Result<HyperspectralCube> {
    tv_denoise_with(cube, weight, iters, Execution::Parallel)
}

pub fn tv_denoise_with(
    cube: &HyperspectralCube,
    weight: f64,
    iters: usize,
    exec: Execution,
) -> Result<HyperspectralCube> {
    if !(weight > 0.0) {
        return Err(Error::param(format!("tv weight must be > 0, got {weight}")));
    }
    let planes = map_indexed(exec, cube.bands, |b| {
        tv_denoise_plane(cube.band(b), cube.nx, cube.ny, weight, iters)
    });
    Ok(HyperspectralCube {
        nx: cube.nx,
        ny: cube.ny,
        bands: cube.bands,
        data: planes.concat(),
    })
}

/// Operators and per-problem constants shared by every stage.
pub struct ClassicalProblem<'a> {
    op: CassiOperator,
    yc: &'a CassiMeasurement,
    /// RGB back-projection, present when the RGB anchor is on.
    rgb_bp: Option<Vec<f64>>,
    /// Φ applied to the noise estimate.
    noise_meas: Option<Vec<f64>>,
    step: f64,
    cfg: &'a ReconConfig,
}

impl<'a> ClassicalProblem<'a> {
    pub fn new(
        yc: &'a CassiMeasurement,
        yr: &RgbImage,
        mask: &CodedMask,
        response: &SpectralResponse,
        noise_map: Option<&NoiseMap>,
        cfg: &'a ReconConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if mask.nx != yc.nx || mask.ny != yc.ny || yr.nx != yc.nx || yr.ny != yc.ny || response.bands != yc.bands {
            return Err(Error::dim(
                "reconstruct",
                format!(
                    "measurement {}x{} ({} bands), mask {}x{}, rgb {}x{}, response {} bands",
                    yc.nx, yc.ny, yc.bands, mask.nx, mask.ny, yr.nx, yr.ny, response.bands
                ),
            ));
        }
        let op = CassiOperator::new(mask, &yc.dispersion, yc.bands)?;
        op.check_meas(yc, "reconstruct")?;
        let step = match cfg.step_size {
            Some(s) => s,
            None => {
                let m = op.gram_diag().into_iter().fold(0.0, f64::max);
                if m > 0.0 {
                    1.0 / m
                } else {
                    1.0
                }
            }
        };
        let rgb_bp = cfg
            .use_rgb
            .then(|| RgbBackprojector::new(response).apply(&yr.data, yc.nx * yc.ny));
        let noise_meas = match noise_map {
            Some(n) => {
                if (n.nx, n.ny, n.bands) != (yc.nx, yc.ny, yc.bands) {
                    return Err(Error::dim(
                        "classical_stage",
                        "noise map dims differ from the measurement's scene",
                    ));
                }
                Some(op.apply(&n.data))
            }
            None => None,
        };
        Ok(ClassicalProblem {
            op,
            yc,
            rgb_bp,
            noise_meas,
            step,
            cfg,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// `x₀ = Φᵀ y / (ΦᵀΦ 𝟙 + ε)`.
    pub fn initial(&self) -> HyperspectralCube {
        let bp = CassiBackprojector::new(self.op.clone());
        HyperspectralCube {
            nx: self.op.nx,
            ny: self.op.ny,
            bands: self.op.bands,
            data: bp.apply(&self.yc.data),
        }
    }

    /// `x + TV(step·Φᵀ r + β (x_rgb − x))` with `r = Y − Φ N − Φ x`.
    pub fn stage(&self, x: &HyperspectralCube) -> Result<HyperspectralCube> {
        self.op.check_cube(x, "classical_stage")?;
        let fx = self.op.apply(&x.data);
        let mut r: Vec<f64> = self.yc.data.iter().zip(&fx).map(|(y, f)| y - f).collect();
        if let Some(nm) = &self.noise_meas {
            r.iter_mut().zip(nm).for_each(|(r, n)| *r -= n);
        }
        let mut g = self.op.apply_t(&r);
        g.iter_mut().for_each(|v| *v *= self.step);
        if let Some(bp) = &self.rgb_bp {
            let beta = self.cfg.rgb_weight;
            for ((g, b), x) in g.iter_mut().zip(bp).zip(&x.data) {
                *g += beta * (b - x);
            }
        }
        let update = HyperspectralCube {
            nx: x.nx,
            ny: x.ny,
            bands: x.bands,
            data: g,
        };
        let update = tv_denoise_with(&update, self.cfg.tv_weight, self.cfg.tv_iters, self.cfg.exec)?;
        let data = x.data.iter().zip(&update.data).map(|(a, b)| a + b).collect();
        Ok(HyperspectralCube {
            nx: x.nx,
            ny: x.ny,
            bands: x.bands,
            data,
        })
    }

    /// Data-fidelity term `‖Y − Φ x‖²`.
    pub fn fidelity(&self, x: &HyperspectralCube) -> f64 {
        self.op
            .apply(&x.data)
            .iter()
            .zip(&self.yc.data)
            .map(|(f, y)| (y - f) * (y - f))
            .sum()
    }
}

/// One stage of the iteration, without the final clamp.
pub fn classical_stage(
    x_n: &HyperspectralCube,
    yc: &CassiMeasurement,
    yr: &RgbImage,
    noise_map: Option<&NoiseMap>,
    mask: &CodedMask,
    response: &SpectralResponse,
    cfg: &ReconConfig,
) -> Result<HyperspectralCube> {
    ClassicalProblem::new(yc, yr, mask, response, noise_map, cfg)?.stage(x_n)
}

/// Back-projection start, `cfg.stages` stages, clamp to `[0, 1]`.
pub fn reconstruct_classical(
    yc: &CassiMeasurement,
    yr: &RgbImage,
    mask: &CodedMask,
    response: &SpectralResponse,
    cfg: &ReconConfig,
) -> Result<HyperspectralCube> {
    let noise = if cfg.use_noise_estimate {
        Some(estimate_noise_analytic(yc, yr, mask, response)?)
    } else {
        None
    };
    let problem = ClassicalProblem::new(yc, yr, mask, response, noise.as_ref(), cfg)?;
    let mut x = problem.initial();
    for _ in 0..cfg.stages {
        x = problem.stage(&x)?;
    }
    Ok(x.clamp01())
}
