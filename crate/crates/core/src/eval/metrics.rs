use crate::error::{Error, Result};
use crate::spectral::HyperspectralCube;

/// PSNR reported for identical inputs once aggregated.
pub const PSNR_CAP: f64 = 100.0;

/// Truth values below this are excluded from MRAE.
pub const MRAE_GUARD: f64 = 1e-4;

fn check(pred: &HyperspectralCube, truth: &HyperspectralCube, op: &'static str) -> Result<()> {
    if !pred.same_dims(truth) {
        return Err(Error::dim(op, format!("{:?} vs {:?}", pred.dims(), truth.dims())));
    }
    Ok(())
}

pub fn mse(pred: &HyperspectralCube, truth: &HyperspectralCube) -> Result<f64> {
    check(pred, truth, "mse")?;
    let s: f64 = pred.data.iter().zip(&truth.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.data.len() as f64)
}

/// `10 log10(1 / MSE)` with peak 1. Identical inputs give `+∞`.
pub fn psnr(pred: &HyperspectralCube, truth: &HyperspectralCube) -> Result<f64> {
    let m = mse(pred, truth)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// PSNR with infinities replaced by [`PSNR_CAP`].
pub fn psnr_capped(pred: &HyperspectralCube, truth: &HyperspectralCube) -> Result<f64> {
    Ok(psnr(pred, truth)?.min(PSNR_CAP))
}

pub fn rmse(pred: &HyperspectralCube, truth: &HyperspectralCube) -> Result<f64> {
    Ok(mse(pred, truth)?.sqrt())
}

/// Mean `|pred − truth| / truth` over voxels with `truth ≥ MRAE_GUARD`.
pub fn mrae(pred: &HyperspectralCube, truth: &HyperspectralCube) -> Result<f64> {
    check(pred, truth, "mrae")?;
    let (sum, n) = pred
        .data
        .iter()
        .zip(&truth.data)
        .filter(|(_, &t)| t >= MRAE_GUARD)
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t).abs() / t, n + 1));
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "every truth voxel is below the MRAE guard".into(),
        ));
    }
    Ok(sum / n as f64)
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| {
            let t = i as f64 - r;
            (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM of one plane over every fully-covered window position.
pub fn ssim_plane(a: &[f64], b: &[f64], nx: usize, ny: usize) -> f64 {
    let w = gaussian_window();
    let (c1, c2) = ((K1 * 1.0f64).powi(2), (K2 * 1.0f64).powi(2));
    let (ox, oy) = (nx + 1 - SSIM_WIN, ny + 1 - SSIM_WIN);
    let mut total = 0.0;
    for i in 0..ox {
        for j in 0..oy {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (u, wu) in w.iter().enumerate() {
                for (v, wv) in w.iter().enumerate() {
                    let k = (i + u) * ny + j + v;
                    let wt = wu * wv;
                    let (x, y) = (a[k], b[k]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (ox * oy) as f64
}

/// Mean over bands of [`ssim_plane`]. Needs both spatial sides ≥ 11.
pub fn ssim(pred: &HyperspectralCube, truth: &HyperspectralCube) -> Result<f64> {
    check(pred, truth, "ssim")?;
    if pred.nx < SSIM_WIN || pred.ny < SSIM_WIN {
        return Err(Error::UndefinedMetric(format!(
            "ssim needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {}x{}",
            pred.nx, pred.ny
        )));
    }
    let s: f64 = (0..pred.bands)
        .map(|b| ssim_plane(pred.band(b), truth.band(b), pred.nx, pred.ny))
        .sum();
    Ok(s / pred.bands as f64)
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Spatial mean of each band over `region`.
pub fn spectral_curve(cube: &HyperspectralCube, region: Region) -> Result<Vec<f64>> {
    if region.x0 >= region.x1 || region.y0 >= region.y1 {
        return Err(Error::param(format!("empty region {region:?}")));
    }
    if region.x1 > cube.nx || region.y1 > cube.ny {
        return Err(Error::param(format!(
            "region {region:?} outside {}x{}",
            cube.nx, cube.ny
        )));
    }
    let n = ((region.x1 - region.x0) * (region.y1 - region.y0)) as f64;
    Ok((0..cube.bands)
        .map(|b| {
            let mut s = 0.0;
            for x in region.x0..region.x1 {
                for y in region.y0..region.y1 {
                    s += cube.get(x, y, b);
                }
            }
            s / n
        })
        .collect())
}

pub fn spectral_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("channel,value\n");
    for (i, v) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

/// Pearson correlation of two curves; 0 when either is constant.
pub fn curve_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    }
}
