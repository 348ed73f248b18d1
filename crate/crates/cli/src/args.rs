use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

/// Dual-camera CASSI simulation, reconstruction and benchmarking.
#[derive(Debug, Parser)]
#[command(name = "dualcassi", version, about)]
pub struct Cli {
    /// Plain `key=value` file; keys are long flag names, flags win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base seed for noise, masks or training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 keeps the default pool).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes, one HSC1 file per seed.
    Synth(SynthArgs),
    /// Measure scenes through both cameras.
    Simulate(SimulateArgs),
    /// Recover a cube from a measurement pair.
    Reconstruct(ReconstructArgs),
    /// Train the unrolled network.
    Train(TrainArgs),
    /// Score methods and mask types over a set of scenes.
    Bench(BenchArgs),
    /// Compare a reconstruction with its ground truth.
    Metrics(MetricsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Simulate(_) => "simulate",
            Command::Reconstruct(_) => "reconstruct",
            Command::Train(_) => "train",
            Command::Bench(_) => "bench",
            Command::Metrics(_) => "metrics",
        }
    }
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Scene size as NXxNYxBANDS.
    #[arg(long)]
    pub dims: Option<Dims>,
    /// Seeds: `a..b` (inclusive), `a,b,c` or a single number.
    #[arg(long)]
    pub seeds: Option<SeedList>,
    /// Number of Gaussian blobs per scene.
    #[arg(long)]
    pub blobs: Option<usize>,
    /// Spectral width of each blob, as a fraction of the band range.
    #[arg(long)]
    pub smoothness: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// manual, rand, normal or dynamic.
    #[arg(long)]
    pub mask: Option<String>,
    /// Mask-net checkpoint for the dynamic policy.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Seed of the template mask.
    #[arg(long)]
    pub mask_seed: Option<u64>,
    /// Fraction of open pixels in the template mask.
    #[arg(long)]
    pub open_ratio: Option<f64>,
    /// Keep a pixel when its removal probability is below this.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OpticsArgs {
    /// Dispersion step in pixels per band.
    #[arg(long)]
    pub d: Option<usize>,
    /// Detector noise standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// HSC1 file or a directory of them.
    #[arg(long, value_name = "PATH")]
    pub scenes: Option<PathBuf>,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[command(flatten)]
    pub optics: OpticsArgs,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// CASSI measurement (HSM1).
    #[arg(long, value_name = "PATH")]
    pub meas: Option<PathBuf>,
    /// RGB measurement (HSR1).
    #[arg(long, value_name = "PATH")]
    pub rgb: Option<PathBuf>,
    /// Coded mask (HSK1).
    #[arg(long, value_name = "PATH")]
    pub mask: Option<PathBuf>,
    /// Ground truth (HSC1); enables metric output.
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
    /// classical or dmdc.
    #[arg(long)]
    pub method: Option<String>,
    /// Number of unrolled stages.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Network checkpoint for the dmdc method.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub classical: ClassicalArgs,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args)]
pub struct ClassicalArgs {
    /// Strength of the TV smoothing in each stage.
    #[arg(long)]
    pub tv_weight: Option<f64>,
    /// Inner iterations of the TV solver.
    #[arg(long)]
    pub tv_iters: Option<usize>,
    /// Gradient step (default: inverse of the largest operator gain).
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Pull towards the RGB back-projection.
    #[arg(long)]
    pub rgb_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct NetArgs {
    /// Use the RGB measurement.
    #[arg(long)]
    pub use_rgb: Option<bool>,
    /// Subtract an estimate of the detector noise.
    #[arg(long)]
    pub use_ne: Option<bool>,
    /// Use cross attention between the two streams.
    #[arg(long)]
    pub use_cross: Option<bool>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Side of the spatial attention window (must divide both image sides).
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// HSC1 file or directory; otherwise scenes are synthesised.
    #[arg(long, value_name = "PATH")]
    pub scenes: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[command(flatten)]
    pub optics: OpticsArgs,
    #[command(flatten)]
    pub net: NetArgs,
    /// Number of unrolled stages.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Feature width of the network.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Weight of the measurement-consistency term in the loss.
    #[arg(long)]
    pub xi: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Halve the learning rate every this many epochs.
    #[arg(long)]
    pub halve_every: Option<usize>,
    /// Scenes per gradient step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Width of the mask net (dynamic policy).
    #[arg(long)]
    pub channels: Option<usize>,
    /// Penalty that holds the dynamic open ratio at the template ratio.
    #[arg(long)]
    pub rate_weight: Option<f64>,
    /// Learning-rate multiplier for the mask net.
    #[arg(long)]
    pub mask_lr_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub optics: OpticsArgs,
    /// Comma list of mask types.
    #[arg(long)]
    pub masks: Option<String>,
    /// Comma list of methods.
    #[arg(long)]
    pub methods: Option<String>,
    /// Stages of the classical method.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Stages of the network.
    #[arg(long)]
    pub dmdc_stages: Option<usize>,
    /// Network checkpoint, or `mask=path` pairs separated by commas.
    #[arg(long)]
    pub weights: Option<String>,
    /// Mask-net checkpoint for the dynamic mask type.
    #[arg(long, value_name = "PATH")]
    pub mask_weights: Option<PathBuf>,
    /// Seed of the template mask.
    #[arg(long)]
    pub mask_seed: Option<u64>,
    /// Keep a pixel when its removal probability is below this.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub classical: ClassicalArgs,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reconstruction (HSC1).
    #[arg(long, value_name = "PATH")]
    pub pred: Option<PathBuf>,
    /// Ground truth (HSC1).
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
    /// `x0,y0,x1,y1` rectangle for spectral curves.
    #[arg(long)]
    pub region: Option<RegionArg>,
}

/// `NXxNYxBANDS`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub bands: usize,
}

impl FromStr for Dims {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('x').collect();
        let bad = || format!("dims {s:?} should look like 32x32x8");
        if parts.len() != 3 {
            return Err(bad());
        }
        let n: Vec<usize> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        if n.contains(&0) {
            return Err(bad());
        }
        Ok(Dims {
            nx: n[0],
            ny: n[1],
            bands: n[2],
        })
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.bands)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

impl FromStr for SeedList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<u64>().map_err(|_| format!("bad seed {t:?} in {s:?}"));
        if let Some((a, b)) = s.split_once("..") {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(format!("empty seed range {s:?}"));
            }
            return Ok(SeedList((a..=b).collect()));
        }
        let seeds = s.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
        Ok(SeedList(seeds))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionArg(pub [usize; 4]);

impl FromStr for RegionArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| format!("region {s:?} should be x0,y0,x1,y1"))
            })
            .collect::<Result<_, _>>()?;
        <[usize; 4]>::try_from(v)
            .map(RegionArg)
            .map_err(|_| format!("region {s:?} should be x0,y0,x1,y1"))
    }
}
