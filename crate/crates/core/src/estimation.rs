//! Approximate inverses of both camera paths and noise estimation from the
//! disagreement between them.

use crate::error::{Error, Result};
use crate::masks::CodedMask;
use crate::nn::params::{Graph, Init, ModelParams};
use crate::nn::tape::{LinearMap, Padding, Tensor, Var};
use crate::optics::{CassiMeasurement, CassiOperator};
use crate::spectral::{HyperspectralCube, RgbImage, SpectralResponse};

/// Regulariser added to every normaliser.
pub const EPS_REG: f64 = 1e-6;

/// Divisors smaller than this are treated as zero by the analytic estimator.
pub const GUARD: f64 = 1e-3;

/// Width of the learned estimator's hidden features.
pub const NE_WIDTH: usize = 64;

/// Signed per-voxel noise estimate, laid out like a cube.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap {
    pub nx: usize,
    pub ny: usize,
    pub bands: usize,
    pub data: Vec<f64>,
}

impl NoiseMap {
    pub fn zeros(nx: usize, ny: usize, bands: usize) -> Self {
        NoiseMap {
            nx,
            ny,
            bands,
            data: vec![0.0; nx * ny * bands],
        }
    }

    pub fn rms(&self) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }
}

/// Per-pixel minimum-norm inverse of the RGB path `y = ½ Ω x`:
/// `x = Aᵀ (A Aᵀ + ε I)⁻¹ y` with `A = ½ Ω` (3 × nλ).
#[derive(Clone, Debug)]
pub struct RgbBackprojector {
    pub bands: usize,
    /// `nλ × 3`, row-major.
    pinv: Vec<f64>,
}

impl RgbBackprojector {
    pub fn new(response: &SpectralResponse) -> Self {
        let nb = response.bands;
        let a = |c: usize, b: usize| 0.5 * response.weight(c, b);
        let mut g = [[0.0; 3]; 3];
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..nb).map(|b| a(i, b) * a(j, b)).sum::<f64>() + if i == j { EPS_REG } else { 0.0 };
            }
        }
        let inv = invert3(&g);
        let mut pinv = vec![0.0; nb * 3];
        for b in 0..nb {
            for c in 0..3 {
                pinv[b * 3 + c] = (0..3).map(|k| a(k, b) * inv[k][c]).sum();
            }
        }
        RgbBackprojector { bands: nb, pinv }
    }

    /// Flat `3 × n` image to flat `nλ × n` cube.
    pub fn apply(&self, rgb: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.bands * n];
        for b in 0..self.bands {
            let dst = &mut out[b * n..(b + 1) * n];
            for c in 0..3 {
                let w = self.pinv[b * 3 + c];
                for (d, s) in dst.iter_mut().zip(&rgb[c * n..(c + 1) * n]) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * adj[0][0] + m[0][1] * adj[1][0] + m[0][2] * adj[2][0];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = adj[i][j] / det;
        }
    }
    out
}

pub fn backproject_rgb(yr: &RgbImage, response: &SpectralResponse) -> Result<HyperspectralCube> {
    let n = yr.nx * yr.ny;
    let data = RgbBackprojector::new(response).apply(&yr.data, n);
    Ok(HyperspectralCube {
        nx: yr.nx,
        ny: yr.ny,
        bands: response.bands,
        data,
    })
}

/// `x = Φᵀ y / (ΦᵀΦ 𝟙 + ε)`, as a linear map usable on a tape.
#[derive(Clone, Debug)]
pub struct CassiBackprojector {
    pub op: CassiOperator,
    inv_norm: Vec<f64>,
}

impl CassiBackprojector {
    pub fn new(op: CassiOperator) -> Self {
        let ones = vec![1.0; op.cube_len()];
        let inv_norm = op
            .apply_t(&op.apply(&ones))
            .iter()
            .map(|v| 1.0 / (v + EPS_REG))
            .collect();
        CassiBackprojector { op, inv_norm }
    }

    /// Per-voxel factor `1 / (ΦᵀΦ 𝟙 + ε)`.
    pub fn inv_norm(&self) -> &[f64] {
        &self.inv_norm
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.op.apply_t(y);
        x.iter_mut().zip(&self.inv_norm).for_each(|(x, s)| *x *= s);
        x
    }
}

impl LinearMap for CassiBackprojector {
    fn in_len(&self) -> usize {
        self.op.meas_len()
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.op.bands, self.op.nx, self.op.ny]
    }
    fn apply(&self, y: &[f64]) -> Vec<f64> {
        CassiBackprojector::apply(self, y)
    }
    fn apply_t(&self, x: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = x.iter().zip(&self.inv_norm).map(|(x, s)| x * s).collect();
        self.op.apply(&scaled)
    }
}

pub fn backproject_cassi(yc: &CassiMeasurement, mask: &CodedMask) -> Result<HyperspectralCube> {
    let op = CassiOperator::new(mask, &yc.dispersion, yc.bands)?;
    op.check_meas(yc, "backproject_cassi")?;
    let bp = CassiBackprojector::new(op);
    Ok(HyperspectralCube {
        nx: yc.nx,
        ny: yc.ny,
        bands: yc.bands,
        data: bp.apply(&yc.data),
    })
}

/// Divides the disagreement between the two back-projections by the
/// disagreement between their responses to a unit measurement, voxel by
/// voxel. Voxels where that divisor is below [`GUARD`] get 0.
pub fn estimate_noise_analytic(
    yc: &CassiMeasurement,
    yr: &RgbImage,
    mask: &CodedMask,
    response: &SpectralResponse,
) -> Result<NoiseMap> {
    if yr.nx != yc.nx || yr.ny != yc.ny || response.bands != yc.bands {
        return Err(Error::dim(
            "estimate_noise_analytic",
            format!(
                "rgb {}x{}, response {} bands, measurement {}x{} with {} bands",
                yr.nx, yr.ny, response.bands, yc.nx, yc.ny, yc.bands
            ),
        ));
    }
    let op = CassiOperator::new(mask, &yc.dispersion, yc.bands)?;
    op.check_meas(yc, "estimate_noise_analytic")?;
    let bpc = CassiBackprojector::new(op);
    let bpr = RgbBackprojector::new(response);
    let n = yc.nx * yc.ny;
    let xc = bpc.apply(&yc.data);
    let xr = bpr.apply(&yr.data, n);
    let wc = bpc.apply(&vec![1.0; yc.data.len()]);
    let wr = bpr.apply(&vec![1.0; 3 * n], n);
    let data = xc
        .iter()
        .zip(&xr)
        .zip(wc.iter().zip(&wr))
        .map(|((c, r), (a, b))| {
            let w = a - b;
            if w.abs() < GUARD {
                0.0
            } else {
                (c - r) / w
            }
        })
        .collect();
    Ok(NoiseMap {
        nx: yc.nx,
        ny: yc.ny,
        bands: yc.bands,
        data,
    })
}

/// Fresh estimator weights under `prefix` (e.g. `"ne."`).
pub fn init_noise_estimator(params: &mut ModelParams, prefix: &str, bands: usize, init: &mut Init) -> Result<()> {
    let w = NE_WIDTH;
    params.insert(format!("{prefix}up.w"), init.fan_in(&[w, bands, 1, 1], bands, 1.0))?;
    params.insert(format!("{prefix}up.b"), Tensor::zeros(&[w]))?;
    params.insert(format!("{prefix}conv.w"), init.fan_in(&[w, w, 3, 3], 9 * w, 1.0))?;
    params.insert(format!("{prefix}conv.b"), Tensor::zeros(&[w]))?;
    params.insert(format!("{prefix}down.w"), init.fan_in(&[bands, w, 1, 1], w, 0.1))?;
    params.insert(format!("{prefix}down.b"), Tensor::zeros(&[bands]))?;
    params.insert(format!("{prefix}tau"), Tensor::scalar(0.01))?;
    params.insert(format!("{prefix}eps"), Tensor::scalar(0.0))?;
    Ok(())
}

fn ne_branch(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let p = |s: &str| format!("{prefix}{s}");
    let (uw, ub) = (g.param(&p("up.w"))?, g.param(&p("up.b"))?);
    let (cw, cb) = (g.param(&p("conv.w"))?, g.param(&p("conv.b"))?);
    let (dw, db) = (g.param(&p("down.w"))?, g.param(&p("down.b"))?);
    let tau = g.param(&p("tau"))?;
    let up = g.conv2d(x, uw, Some(ub), Padding::Zero)?;
    let c = g.conv2d(up, cw, Some(cb), Padding::Zero)?;
    let down = g.conv2d(c, dw, Some(db), Padding::Zero)?;
    g.soft_shrink(down, tau)
}

/// `Soft(Down(Conv(Up(xc)))) − Soft(Down(Conv(Up(xr)))) + ε` with one set of
/// weights shared by both branches. Inputs are `(nλ, nx, ny)`.
pub fn noise_estimator_graph(g: &mut Graph, xc: Var, xr: Var, prefix: &str) -> Result<Var> {
    if g.shape(xc) != g.shape(xr) || g.shape(xc).len() != 3 {
        return Err(Error::dim(
            "learned_noise_estimate",
            format!("{:?} vs {:?}", g.shape(xc), g.shape(xr)),
        ));
    }
    let a = ne_branch(g, xc, prefix)?;
    let b = ne_branch(g, xr, prefix)?;
    let d = g.sub(a, b)?;
    let eps = g.param(&format!("{prefix}eps"))?;
    g.add_scalar(d, eps)
}

/// Inference wrapper around [`noise_estimator_graph`].
pub fn learned_noise_estimate(
    xc: &HyperspectralCube,
    xr: &HyperspectralCube,
    weights: &ModelParams,
    prefix: &str,
) -> Result<NoiseMap> {
    if !xc.same_dims(xr) {
        return Err(Error::dim(
            "learned_noise_estimate",
            format!("{:?} vs {:?}", xc.dims(), xr.dims()),
        ));
    }
    let mut g = Graph::new(weights);
    let shape = vec![xc.bands, xc.nx, xc.ny];
    let a = g.constant(Tensor::new(shape.clone(), xc.data.clone())?);
    let b = g.constant(Tensor::new(shape, xr.data.clone())?);
    let out = noise_estimator_graph(&mut g, a, b, prefix)?;
    Ok(NoiseMap {
        nx: xc.nx,
        ny: xc.ny,
        bands: xc.bands,
        data: g.value(out).data.clone(),
    })
}
