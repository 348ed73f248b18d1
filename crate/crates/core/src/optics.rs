//! Dual-camera forward model.
//!
//! A 50/50 beamsplitter sends half of the scene to an RGB camera and half
//! through a coded mask and a dispersive element onto a CASSI detector:
//!
//! ```text
//! g_c(x, y) = ½ Σ_λ ω_c(λ) X(x, y, λ)                     + N_r
//! Y(x, y')  = ½ Σ_λ M(x, y' - o_λ) X(x, y' - o_λ, λ)     + N_c
//! ```
//!
//! where `o_λ` is the shear offset of band `λ` (`d·λ` for linear dispersion,
//! 0-based bands). The measurement is `ny + max o_λ` pixels wide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::masks::CodedMask;
use crate::nn::tape::LinearMap;
use crate::parallel::{map_indexed, Execution};
use crate::spectral::{HyperspectralCube, RgbImage, SpectralResponse};

/// Per-band shear along the width axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dispersion {
    /// Band `b` (0-based) is shifted by `step · b` pixels.
    Linear(usize),
    /// Calibrated per-band offsets, one per band.
    Table(Vec<usize>),
}

impl Dispersion {
    pub fn offset(&self, band: usize) -> usize {
        match self {
            Dispersion::Linear(d) => d * band,
            Dispersion::Table(t) => t[band],
        }
    }

    pub fn offsets(&self, bands: usize) -> Vec<usize> {
        (0..bands).map(|b| self.offset(b)).collect()
    }

    /// Width of the detector image for a scene `ny` wide with `bands` bands.
    pub fn width(&self, ny: usize, bands: usize) -> usize {
        ny + (0..bands).map(|b| self.offset(b)).max().unwrap_or(0)
    }

    /// The linear step, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            Dispersion::Linear(d) => Some(*d),
            Dispersion::Table(_) => None,
        }
    }

    pub(crate) fn check(&self, bands: usize) -> Result<()> {
        match self {
            Dispersion::Table(t) if t.len() != bands => Err(Error::dim(
                "dispersion",
                format!("offset table has {} entries for {bands} bands", t.len()),
            )),
            _ => Ok(()),
        }
    }
}

impl From<usize> for Dispersion {
    fn from(d: usize) -> Self {
        Dispersion::Linear(d)
    }
}

/// Additive white Gaussian detector noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec { sigma: 0.0, seed: 0 };

    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::param(format!("noise sigma must be ≥ 0, got {sigma}")));
        }
        Ok(NoiseSpec { sigma, seed })
    }

    /// Same sigma, independent stream.
    pub fn derive(&self, stream: u64) -> NoiseSpec {
        NoiseSpec {
            sigma: self.sigma,
            seed: derive_seed(self.seed, stream),
        }
    }

    pub(crate) fn apply(&self, data: &mut [f64]) {
        if self.sigma == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, self.sigma).expect("sigma validated");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

/// SplitMix64 mix of a seed and a stream id.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sheared 2D CASSI detector image.
#[derive(Clone, Debug, PartialEq)]
pub struct CassiMeasurement {
    pub nx: usize,
    /// Width of the detector, `ny + max offset`.
    pub width: usize,
    /// Width of the scene that produced it.
    pub ny: usize,
    pub bands: usize,
    pub dispersion: Dispersion,
    /// Row-major `nx × width`.
    pub data: Vec<f64>,
}

impl CassiMeasurement {
    pub fn zeros(nx: usize, ny: usize, bands: usize, dispersion: Dispersion) -> Self {
        let width = dispersion.width(ny, bands);
        CassiMeasurement {
            nx,
            width,
            ny,
            bands,
            dispersion,
            data: vec![0.0; nx * width],
        }
    }

    pub fn same_layout(&self, other: &CassiMeasurement) -> bool {
        self.nx == other.nx
            && self.width == other.width
            && self.ny == other.ny
            && self.bands == other.bands
            && self.dispersion == other.dispersion
    }

    /// Copy with `data` replaced.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        CassiMeasurement {
            data,
            dispersion: self.dispersion.clone(),
            ..*self
        }
    }
}

/// Per-band planes of the sheared volume, each `nx × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShearedVolume {
    pub nx: usize,
    pub width: usize,
    pub ny: usize,
    pub bands: usize,
    pub dispersion: Dispersion,
    pub data: Vec<f64>,
}

impl ShearedVolume {
    pub fn plane(&self, band: usize) -> &[f64] {
        let n = self.nx * self.width;
        &self.data[band * n..(band + 1) * n]
    }
}

/// The noiseless linear CASSI operator Φ_c for a fixed mask and dispersion.
#[derive(Clone, Debug)]
pub struct CassiOperator {
    pub nx: usize,
    pub ny: usize,
    pub bands: usize,
    pub width: usize,
    dispersion: Dispersion,
    offsets: Vec<usize>,
    /// ½·M, pre-multiplied.
    half_mask: Vec<f64>,
}

impl CassiOperator {
    pub fn new(mask: &CodedMask, dispersion: &Dispersion, bands: usize) -> Result<Self> {
        dispersion.check(bands)?;
        if bands == 0 {
            return Err(Error::param("operator needs at least one band"));
        }
        Ok(CassiOperator {
            nx: mask.nx,
            ny: mask.ny,
            bands,
            width: dispersion.width(mask.ny, bands),
            dispersion: dispersion.clone(),
            offsets: dispersion.offsets(bands),
            half_mask: mask.data.iter().map(|m| 0.5 * m).collect(),
        })
    }

    pub fn dispersion(&self) -> &Dispersion {
        &self.dispersion
    }

    pub fn cube_len(&self) -> usize {
        self.nx * self.ny * self.bands
    }

    pub fn meas_len(&self) -> usize {
        self.nx * self.width
    }

    /// `y = Φ x` on flat buffers.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (nx, ny, w) = (self.nx, self.ny, self.width);
        let mut y = vec![0.0; nx * w];
        for (b, &off) in self.offsets.iter().enumerate() {
            let plane = &x[b * nx * ny..(b + 1) * nx * ny];
            for r in 0..nx {
                let src = &plane[r * ny..(r + 1) * ny];
                let m = &self.half_mask[r * ny..(r + 1) * ny];
                let dst = &mut y[r * w + off..r * w + off + ny];
                for ((d, s), m) in dst.iter_mut().zip(src).zip(m) {
                    *d += m * s;
                }
            }
        }
        y
    }

    /// `x = Φᵀ y` on flat buffers.
    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        let (nx, ny, w) = (self.nx, self.ny, self.width);
        let mut x = vec![0.0; nx * ny * self.bands];
        for (b, &off) in self.offsets.iter().enumerate() {
            let plane = &mut x[b * nx * ny..(b + 1) * nx * ny];
            for r in 0..nx {
                let src = &y[r * w + off..r * w + off + ny];
                let m = &self.half_mask[r * ny..(r + 1) * ny];
                for ((d, s), m) in plane[r * ny..(r + 1) * ny].iter_mut().zip(src).zip(m) {
                    *d = m * s;
                }
            }
        }
        x
    }

    /// Diagonal of Φ Φᵀ, one entry per detector pixel. Φ Φᵀ is diagonal
    /// because every voxel lands on exactly one pixel.
    pub fn gram_diag(&self) -> Vec<f64> {
        let sq: Vec<f64> = self.half_mask.iter().map(|m| m * m).collect();
        let (nx, ny, w) = (self.nx, self.ny, self.width);
        let mut out = vec![0.0; nx * w];
        for &off in &self.offsets {
            for r in 0..nx {
                for (d, s) in out[r * w + off..r * w + off + ny]
                    .iter_mut()
                    .zip(&sq[r * ny..(r + 1) * ny])
                {
                    *d += s;
                }
            }
        }
        out
    }

    pub fn forward(&self, cube: &HyperspectralCube) -> Result<CassiMeasurement> {
        self.check_cube(cube, "cassi_forward")?;
        Ok(CassiMeasurement {
            nx: self.nx,
            width: self.width,
            ny: self.ny,
            bands: self.bands,
            dispersion: self.dispersion.clone(),
            data: self.apply(&cube.data),
        })
    }

    pub fn adjoint(&self, meas: &CassiMeasurement) -> Result<HyperspectralCube> {
        self.check_meas(meas, "cassi_adjoint")?;
        Ok(HyperspectralCube {
            nx: self.nx,
            ny: self.ny,
            bands: self.bands,
            data: self.apply_t(&meas.data),
        })
    }

    pub(crate) fn check_cube(&self, cube: &HyperspectralCube, op: &'static str) -> Result<()> {
        if cube.dims() != (self.nx, self.ny, self.bands) {
            return Err(Error::dim(
                op,
                format!(
                    "cube {:?} vs operator {:?}",
                    cube.dims(),
                    (self.nx, self.ny, self.bands)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_meas(&self, meas: &CassiMeasurement, op: &'static str) -> Result<()> {
        if meas.nx != self.nx
            || meas.width != self.width
            || meas.ny != self.ny
            || meas.bands != self.bands
            || meas.data.len() != self.meas_len()
        {
            return Err(Error::dim(
                op,
                format!(
                    "measurement {}x{} (ny {}, {} bands) vs operator {}x{} (ny {}, {} bands)",
                    meas.nx, meas.width, meas.ny, meas.bands, self.nx, self.width, self.ny, self.bands
                ),
            ));
        }
        Ok(())
    }
}

/// RGB camera path: `g_c = ½ Σ_λ ω_c(λ) X(·, ·, λ) + n`.
pub fn rgb_project(cube: &HyperspectralCube, response: &SpectralResponse, noise: &NoiseSpec) -> Result<RgbImage> {
    if response.bands != cube.bands {
        return Err(Error::dim(
            "rgb_project",
            format!("response has {} bands, cube has {}", response.bands, cube.bands),
        ));
    }
    let n = cube.plane_len();
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        let out = &mut data[c * n..(c + 1) * n];
        for b in 0..cube.bands {
            let w = 0.5 * response.weight(c, b);
            for (o, v) in out.iter_mut().zip(cube.band(b)) {
                *o += w * v;
            }
        }
    }
    noise.apply(&mut data);
    Ok(RgbImage {
        nx: cube.nx,
        ny: cube.ny,
        data,
    })
}

/// `X'(x, y, λ) = ½ M(x, y) X(x, y, λ)`.
pub fn mask_modulate(cube: &HyperspectralCube, mask: &CodedMask) -> Result<HyperspectralCube> {
    check_mask(cube, mask, "mask_modulate")?;
    let mut out = cube.clone();
    for b in 0..cube.bands {
        for (v, m) in out.band_mut(b).iter_mut().zip(&mask.data) {
            *v *= 0.5 * m;
        }
    }
    Ok(out)
}

/// Shifts band `b` to columns `[o_b, o_b + ny)` of an otherwise zero plane.
pub fn disperse(cube: &HyperspectralCube, dispersion: &Dispersion) -> Result<ShearedVolume> {
    dispersion.check(cube.bands)?;
    let (nx, ny) = (cube.nx, cube.ny);
    let width = dispersion.width(ny, cube.bands);
    let mut data = vec![0.0; nx * width * cube.bands];
    for b in 0..cube.bands {
        let off = dispersion.offset(b);
        let plane = &mut data[b * nx * width..(b + 1) * nx * width];
        let src = cube.band(b);
        for r in 0..nx {
            plane[r * width + off..r * width + off + ny].copy_from_slice(&src[r * ny..(r + 1) * ny]);
        }
    }
    Ok(ShearedVolume {
        nx,
        width,
        ny,
        bands: cube.bands,
        dispersion: dispersion.clone(),
        data,
    })
}

/// Sums the sheared planes onto the detector and adds noise.
pub fn integrate(volume: &ShearedVolume, noise: &NoiseSpec) -> CassiMeasurement {
    let n = volume.nx * volume.width;
    let mut data = vec![0.0; n];
    for b in 0..volume.bands {
        for (d, v) in data.iter_mut().zip(volume.plane(b)) {
            *d += v;
        }
    }
    noise.apply(&mut data);
    CassiMeasurement {
        nx: volume.nx,
        width: volume.width,
        ny: volume.ny,
        bands: volume.bands,
        dispersion: volume.dispersion.clone(),
        data,
    }
}

/// Full CASSI path: modulate, disperse, integrate.
pub fn cassi_forward(
    cube: &HyperspectralCube,
    mask: &CodedMask,
    dispersion: &Dispersion,
    noise: &NoiseSpec,
) -> Result<CassiMeasurement> {
    check_mask(cube, mask, "cassi_forward")?;
    let op = CassiOperator::new(mask, dispersion, cube.bands)?;
    let mut meas = op.forward(cube)?;
    noise.apply(&mut meas.data);
    Ok(meas)
}

/// Exact adjoint of the noiseless [`cassi_forward`].
pub fn cassi_adjoint(meas: &CassiMeasurement, mask: &CodedMask) -> Result<HyperspectralCube> {
    if mask.nx != meas.nx || mask.ny != meas.ny {
        return Err(Error::dim(
            "cassi_adjoint",
            format!(
                "mask {}x{} vs measurement scene {}x{}",
                mask.nx, mask.ny, meas.nx, meas.ny
            ),
        ));
    }
    CassiOperator::new(mask, &meas.dispersion, meas.bands)?.adjoint(meas)
}

/// Both detectors at once. The RGB and CASSI noise fields use the same
/// sigma but independent streams derived from `noise.seed`.
pub fn dual_measure(
    cube: &HyperspectralCube,
    mask: &CodedMask,
    response: &SpectralResponse,
    dispersion: &Dispersion,
    noise: &NoiseSpec,
) -> Result<(RgbImage, CassiMeasurement)> {
    let rgb = rgb_project(cube, response, &noise.derive(1))?;
    let cassi = cassi_forward(cube, mask, dispersion, &noise.derive(2))?;
    Ok((rgb, cassi))
}

/// Largest cube (in voxels) [`dense_operator`] will materialise.
pub const DENSE_CAP: usize = 65_536;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn mul_t_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yv) in self.data.chunks(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yv;
            }
        }
        out
    }
}

/// Materialises Φ_c column by column from impulse responses of
/// [`cassi_forward`]. Test oracle for small problems only.
pub fn dense_operator(
    mask: &CodedMask,
    dispersion: &Dispersion,
    dims: (usize, usize, usize),
    exec: Execution,
) -> Result<DenseMatrix> {
    let (nx, ny, bands) = dims;
    let cols = nx * ny * bands;
    if cols > DENSE_CAP {
        return Err(Error::TooLarge {
            size: cols,
            cap: DENSE_CAP,
        });
    }
    if mask.nx != nx || mask.ny != ny {
        return Err(Error::dim(
            "dense_operator",
            format!("mask {}x{} vs dims {nx}x{ny}", mask.nx, mask.ny),
        ));
    }
    dispersion.check(bands)?;
    let rows = nx * dispersion.width(ny, bands);
    let columns = map_indexed(exec, cols, |j| {
        let mut basis = HyperspectralCube::zeros(nx, ny, bands);
        basis.data[j] = 1.0;
        cassi_forward(&basis, mask, dispersion, &NoiseSpec::NONE).map(|m| m.data)
    });
    let mut data = vec![0.0; rows * cols];
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            data[i * cols + j] = v;
        }
    }
    Ok(DenseMatrix { rows, cols, data })
}

impl LinearMap for CassiOperator {
    fn in_len(&self) -> usize {
        self.cube_len()
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.nx, self.width]
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        CassiOperator::apply(self, x)
    }
    fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        CassiOperator::apply_t(self, y)
    }
}

fn check_mask(cube: &HyperspectralCube, mask: &CodedMask, op: &'static str) -> Result<()> {
    if mask.nx != cube.nx || mask.ny != cube.ny {
        return Err(Error::dim(
            op,
            format!("mask {}x{} vs cube {}x{}", mask.nx, mask.ny, cube.nx, cube.ny),
        ));
    }
    Ok(())
}
