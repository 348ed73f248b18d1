//! Simulation and reconstruction for dual-camera coded-aperture snapshot
//! spectral imaging.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod eval;
pub mod io;
pub mod masks;
pub mod nn;
pub mod optics;
pub mod parallel;
pub mod recon;
pub mod spectral;

pub use error::{Error, Result};
pub use masks::{CodedMask, DynamicMaskParams};
pub use optics::{CassiMeasurement, CassiOperator, Dispersion, NoiseSpec};
pub use parallel::Execution;
pub use spectral::{HyperspectralCube, RgbImage, SceneSpec, SpectralResponse};
