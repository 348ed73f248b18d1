//! Spectral data model: cubes, RGB images, detector response curves and
//! the synthetic scene generator.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A hyperspectral scene `nx × ny × bands`.
///
/// Storage is channel-outermost and row-major within a channel, so
/// `data[b * nx * ny + x * ny + y]` is the radiance at row `x`, column `y`
/// of band `b`. Radiance is dimensionless and normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperspectralCube {
    pub nx: usize,
    pub ny: usize,
    pub bands: usize,
    pub data: Vec<f64>,
}

impl HyperspectralCube {
    pub fn zeros(nx: usize, ny: usize, bands: usize) -> Self {
        Self::filled(nx, ny, bands, 0.0)
    }

    pub fn filled(nx: usize, ny: usize, bands: usize, value: f64) -> Self {
        HyperspectralCube {
            nx,
            ny,
            bands,
            data: vec![value; nx * ny * bands],
        }
    }

    pub fn from_vec(nx: usize, ny: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny * bands {
            return Err(Error::dim(
                "cube",
                format!("{} values for a {nx}x{ny}x{bands} cube", data.len()),
            ));
        }
        Ok(HyperspectralCube { nx, ny, bands, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.bands)
    }

    pub fn plane_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, band: usize) -> usize {
        band * self.nx * self.ny + x * self.ny + y
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, band: usize) -> f64 {
        self.data[self.index(x, y, band)]
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[band * n..(band + 1) * n]
    }

    /// A cube of the same shape with `f` applied to every value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        HyperspectralCube {
            nx: self.nx,
            ny: self.ny,
            bands: self.bands,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn same_dims(&self, other: &HyperspectralCube) -> bool {
        self.dims() == other.dims()
    }
}

/// One broken cube invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum CubeViolation {
    LengthMismatch { expected: usize, actual: usize },
    EmptyHeight,
    EmptyWidth,
    TooFewBands(usize),
    NonFinite(usize),
    Negative(usize),
}

impl fmt::Display for CubeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CubeViolation::LengthMismatch { expected, actual } => {
                write!(f, "data length {actual} != nx·ny·nλ = {expected}")
            }
            CubeViolation::EmptyHeight => write!(f, "nx ≥ 1"),
            CubeViolation::EmptyWidth => write!(f, "ny ≥ 1"),
            CubeViolation::TooFewBands(n) => write!(f, "nλ ≥ 2 (got {n})"),
            CubeViolation::NonFinite(i) => write!(f, "non-finite value at flat index {i}"),
            CubeViolation::Negative(i) => write!(f, "negative value at flat index {i}"),
        }
    }
}

/// Lists every invariant the cube violates. An empty list means valid.
pub fn validate_cube(cube: &HyperspectralCube) -> std::result::Result<(), Vec<CubeViolation>> {
    let mut out = Vec::new();
    if cube.nx == 0 {
        out.push(CubeViolation::EmptyHeight);
    }
    if cube.ny == 0 {
        out.push(CubeViolation::EmptyWidth);
    }
    if cube.bands < 2 {
        out.push(CubeViolation::TooFewBands(cube.bands));
    }
    let expected = cube.nx * cube.ny * cube.bands;
    if cube.data.len() != expected {
        out.push(CubeViolation::LengthMismatch {
            expected,
            actual: cube.data.len(),
        });
    }
    for (i, &v) in cube.data.iter().enumerate() {
        if !v.is_finite() {
            out.push(CubeViolation::NonFinite(i));
        } else if v < 0.0 {
            out.push(CubeViolation::Negative(i));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// A three-channel image, R, G, B planes in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        RgbImage {
            nx,
            ny,
            data: vec![0.0; 3 * nx * ny],
        }
    }

    pub fn from_vec(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * nx * ny {
            return Err(Error::dim(
                "rgb image",
                format!("{} values for a 3x{nx}x{ny} image", data.len()),
            ));
        }
        Ok(RgbImage { nx, ny, data })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.nx * self.ny;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Detector response of the RGB camera, one curve per colour channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralResponse {
    pub bands: usize,
    /// R, G, B curves, each of length `bands`.
    pub curves: [Vec<f64>; 3],
    pub normalized: bool,
}

impl SpectralResponse {
    /// Builds a response from raw nonnegative curves, normalising each to sum 1.
    pub fn from_curves(curves: [Vec<f64>; 3]) -> Result<Self> {
        let bands = curves[0].len();
        if bands < 2 || curves.iter().any(|c| c.len() != bands) {
            return Err(Error::param("response curves must share a length ≥ 2"));
        }
        let mut curves = curves;
        for c in curves.iter_mut() {
            if c.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::param("response weights must be finite and ≥ 0"));
            }
            let s: f64 = c.iter().sum();
            if s <= 0.0 {
                return Err(Error::param("every response curve needs a positive weight"));
            }
            c.iter_mut().for_each(|w| *w /= s);
        }
        Ok(SpectralResponse {
            bands,
            curves,
            normalized: true,
        })
    }

    pub fn weight(&self, channel: usize, band: usize) -> f64 {
        self.curves[channel][band]
    }
}

/// Position of band `b` within the normalised channel range `[0, 1]`.
pub(crate) fn band_position(band: usize, bands: usize) -> f64 {
    (band as f64 + 0.5) / bands as f64
}

/// Gaussian R/G/B response curves centred at 5/6, 1/2 and 1/6 of the
/// channel range, each normalised to sum to one.
pub fn default_spectral_response(bands: usize) -> Result<SpectralResponse> {
    if bands < 2 {
        return Err(Error::param(format!("nλ must be ≥ 2, got {bands}")));
    }
    const WIDTH: f64 = 1.0 / 6.0;
    let curve = |center: f64| -> Vec<f64> {
        (0..bands)
            .map(|b| {
                let t = (band_position(b, bands) - center) / WIDTH;
                (-0.5 * t * t).exp()
            })
            .collect()
    };
    SpectralResponse::from_curves([curve(5.0 / 6.0), curve(0.5), curve(1.0 / 6.0)])
}

/// Parameters of a synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub nx: usize,
    pub ny: usize,
    pub bands: usize,
    pub blob_count: usize,
    pub seed: u64,
    /// Standard deviation of each blob's spectral profile, as a fraction of
    /// the channel range.
    pub spectral_smoothness: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            nx: 32,
            ny: 32,
            bands: 8,
            blob_count: 4,
            seed: 0,
            spectral_smoothness: 0.25,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(seed: u64) -> Self {
        SceneSpec {
            seed,
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.bands < 2 {
            return Err(Error::param(format!(
                "scene dims {}x{}x{} below minimum 1x1x2",
                self.nx, self.ny, self.bands
            )));
        }
        if self.blob_count == 0 {
            return Err(Error::param("blob_count must be ≥ 1"));
        }
        if !(self.spectral_smoothness > 0.0 && self.spectral_smoothness.is_finite()) {
            return Err(Error::param("spectral_smoothness must be > 0"));
        }
        Ok(())
    }
}

/// Sum of spatial Gaussian blobs, each with a Gaussian spectrum, rescaled
/// so the brightest voxel is 1. Values are rounded to `f32` precision so
/// the cube survives a trip through the on-disk format unchanged.
pub fn synth_scene(spec: &SceneSpec) -> Result<HyperspectralCube> {
    spec.validate()?;
    let SceneSpec { nx, ny, bands, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cube = HyperspectralCube::zeros(nx, ny, bands);
    let short = nx.min(ny) as f64;

    for _ in 0..spec.blob_count {
        let cx = rng.random_range(0.0..nx as f64);
        let cy = rng.random_range(0.0..ny as f64);
        let sigma = rng.random_range(0.1..0.3) * short;
        let amplitude = rng.random_range(0.3..1.0);
        let center = rng.random_range(0.0..1.0);

        let spatial: Vec<f64> = (0..nx * ny)
            .map(|i| {
                let dx = (i / ny) as f64 + 0.5 - cx;
                let dy = (i % ny) as f64 + 0.5 - cy;
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        for b in 0..bands {
            let t = (band_position(b, bands) - center) / spec.spectral_smoothness;
            let s = amplitude * (-0.5 * t * t).exp();
            for (v, w) in cube.band_mut(b).iter_mut().zip(&spatial) {
                *v += s * w;
            }
        }
    }

    let peak = cube.data.iter().cloned().fold(0.0_f64, f64::max);
    if peak > 0.0 {
        for v in cube.data.iter_mut() {
            *v = (*v / peak) as f32 as f64;
        }
    }
    Ok(cube)
}
