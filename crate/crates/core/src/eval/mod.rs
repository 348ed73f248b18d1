//! Image-quality metrics and the benchmark harness.

pub mod bench;
pub mod metrics;

pub use bench::{measure_fps, run_benchmark, FpsReport, MaskType, Method, MetricReport, ReportRow, Suite, SuiteEntry};
pub use metrics::{curve_correlation, mrae, psnr, psnr_capped, rmse, spectral_curve, spectral_curve_csv, ssim, Region};
