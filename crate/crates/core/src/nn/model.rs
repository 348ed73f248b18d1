//! The unrolled network: `x_{n+1} = x_n + f(Y_c − Φ N − Φ x_n, Y_r)` with a
//! dual-attention subnet as the first `f` and one shared spatial-attention
//! subnet for every later stage.
//!
//! Parameter groups: `rgb.` (RGB lift), `ne.` (noise estimator), `das.`
//! (first stage), `sas.` (all later stages, shared).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::estimation::{init_noise_estimator, noise_estimator_graph, CassiBackprojector, RgbBackprojector};
use crate::masks::CodedMask;
use crate::nn::blocks::{cross_ab, init_block, init_linear, linear, spatial_ab, spectral_ab, to_cube, to_tokens};
use crate::nn::params::{Graph, Init, ModelParams};
use crate::nn::tape::{LinearMap, Padding, ShearGeometry, Tensor, Var};
use crate::optics::{CassiMeasurement, CassiOperator};
use crate::spectral::{HyperspectralCube, RgbImage, SpectralResponse};

/// Hidden width of the RGB lift.
pub const RGB_LIFT: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub stages: usize,
    /// Weight ξ of the measurement-consistency term in the loss.
    pub xi: f64,
    pub with_cross_attention: bool,
    pub with_noise_estimator: bool,
    pub with_rgb: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            embed_dim: 16,
            heads: 2,
            window: 8,
            stages: 2,
            xi: 0.5,
            with_cross_attention: true,
            with_noise_estimator: true,
            with_rgb: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.stages == 0 || self.window == 0 {
            return Err(Error::param("stages and window must be ≥ 1"));
        }
        if !(self.xi >= 0.0) {
            return Err(Error::param(format!("xi must be ≥ 0, got {}", self.xi)));
        }
        Ok(())
    }

    fn check_dims(&self, nx: usize, ny: usize) -> Result<()> {
        if !nx.is_multiple_of(self.window) || !ny.is_multiple_of(self.window) {
            return Err(Error::dim(
                "dmdc_forward",
                format!("window {} does not divide {nx}x{ny}", self.window),
            ));
        }
        Ok(())
    }
}

/// Gain of the final projection of each subnet; small so an untrained
/// network starts close to the back-projection.
const OUT_GAIN: f64 = 0.1;

/// Fresh weights for `bands` spectral channels.
pub fn init_dmdc(bands: usize, cfg: &NetConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut p = ModelParams::new();
    let c = cfg.embed_dim;
    let cross = cfg.with_rgb && cfg.with_cross_attention;
    if cfg.with_rgb {
        p.insert("rgb.up.w", init.fan_in(&[RGB_LIFT, 3, 1, 1], 3, 1.0))?;
        p.insert("rgb.up.b", Tensor::zeros(&[RGB_LIFT]))?;
        p.insert("rgb.down.w", init.fan_in(&[bands, RGB_LIFT, 1, 1], RGB_LIFT, 1.0))?;
        p.insert("rgb.down.b", Tensor::zeros(&[bands]))?;
    }
    if cfg.with_noise_estimator {
        init_noise_estimator(&mut p, "ne.", bands, &mut init)?;
    }
    init_linear(&mut p, "das.embed_c.", bands, c, 1.0, &mut init)?;
    init_block(&mut p, "das.spec_c.", c, &mut init)?;
    init_block(&mut p, "das.spat_c.", c, &mut init)?;
    if cfg.with_rgb {
        init_linear(&mut p, "das.embed_r.", bands, c, 1.0, &mut init)?;
        init_block(&mut p, "das.spec_r.", c, &mut init)?;
        init_block(&mut p, "das.spat_r.", c, &mut init)?;
    }
    if cross {
        init_block(&mut p, "das.cross_c.", c, &mut init)?;
        init_block(&mut p, "das.cross_r.", c, &mut init)?;
        init_block(&mut p, "das.fuse.", c, &mut init)?;
    }
    init_linear(&mut p, "das.out.", c, bands, OUT_GAIN, &mut init)?;
    if cfg.stages > 1 {
        init_linear(&mut p, "sas.embed.", bands, c, 1.0, &mut init)?;
        if cfg.with_rgb {
            init_linear(&mut p, "sas.embed_r.", bands, c, 1.0, &mut init)?;
        }
        if cross {
            init_block(&mut p, "sas.cross.", c, &mut init)?;
        }
        init_block(&mut p, "sas.spat.", c, &mut init)?;
        init_linear(&mut p, "sas.out.", c, bands, OUT_GAIN, &mut init)?;
    }
    Ok(p)
}

/// 1×1 lift of the RGB image to [`RGB_LIFT`] channels, GELU, 1×1
/// projection to `nλ` channels. Input `(3, nx, ny)`.
pub fn rgb_init(g: &mut Graph, rgb: Var) -> Result<Var> {
    let s = g.shape(rgb).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("rgb_init", format!("{s:?} is not a 3-channel image")));
    }
    let (uw, ub) = (g.param("rgb.up.w")?, g.param("rgb.up.b")?);
    let (dw, db) = (g.param("rgb.down.w")?, g.param("rgb.down.b")?);
    let h = g.conv2d(rgb, uw, Some(ub), Padding::Zero)?;
    let h = g.gelu(h);
    g.conv2d(h, dw, Some(db), Padding::Zero)
}

/// First-stage subnet. Feature cubes are `(nλ, nx, ny)`; `rgb_feat` is
/// `None` when the RGB branch is disabled.
pub fn das_forward(g: &mut Graph, cassi_feat: Var, rgb_feat: Option<Var>, cfg: &NetConfig) -> Result<Var> {
    let s = g.shape(cassi_feat).to_vec();
    if s.len() != 3 || rgb_feat.is_some_and(|r| g.shape(r) != s.as_slice()) {
        return Err(Error::dim("das_forward", format!("cassi features {s:?}")));
    }
    let (nx, ny) = (s[1], s[2]);
    let (h, w) = (cfg.heads, cfg.window);
    let t = to_tokens(g, cassi_feat)?;
    let c = linear(g, t, "das.embed_c.")?;
    let c = spectral_ab(g, c, "das.spec_c.", h)?;
    let c = spatial_ab(g, c, nx, ny, w, "das.spat_c.", h)?;
    let fused = match rgb_feat {
        None => c,
        Some(rf) => {
            let t = to_tokens(g, rf)?;
            let r = linear(g, t, "das.embed_r.")?;
            let r = spectral_ab(g, r, "das.spec_r.", h)?;
            let r = spatial_ab(g, r, nx, ny, w, "das.spat_r.", h)?;
            if cfg.with_cross_attention {
                let c2 = cross_ab(g, c, r, "das.cross_c.", h)?;
                let r2 = cross_ab(g, r, c, "das.cross_r.", h)?;
                cross_ab(g, c2, r2, "das.fuse.", h)?
            } else {
                g.add(c, r)?
            }
        }
    };
    let out = linear(g, fused, "das.out.")?;
    to_cube(g, out, nx, ny)
}

/// Later-stage subnet: the residual features attend to the RGB features,
/// then to themselves within spatial windows.
pub fn sas_forward(g: &mut Graph, residual_feat: Var, rgb_feat: Option<Var>, cfg: &NetConfig) -> Result<Var> {
    let s = g.shape(residual_feat).to_vec();
    if s.len() != 3 || rgb_feat.is_some_and(|r| g.shape(r) != s.as_slice()) {
        return Err(Error::dim("sas_forward", format!("residual features {s:?}")));
    }
    let (nx, ny) = (s[1], s[2]);
    let t = to_tokens(g, residual_feat)?;
    let mut e = linear(g, t, "sas.embed.")?;
    if let Some(rf) = rgb_feat {
        let t = to_tokens(g, rf)?;
        let r = linear(g, t, "sas.embed_r.")?;
        e = if cfg.with_cross_attention {
            cross_ab(g, e, r, "sas.cross.", cfg.heads)?
        } else {
            g.add(e, r)?
        };
    }
    let e = spatial_ab(g, e, nx, ny, cfg.window, "sas.spat.", cfg.heads)?;
    let out = linear(g, e, "sas.out.")?;
    to_cube(g, out, nx, ny)
}

/// How the network sees the CASSI operator: either fixed, or tied to a mask
/// variable on the tape so gradients reach the mask.
pub enum Sensing {
    Fixed {
        phi: Rc<dyn LinearMap>,
        bp: Rc<dyn LinearMap>,
        op: CassiOperator,
    },
    Coupled {
        op: CassiOperator,
        keep: Var,
        geom: Rc<ShearGeometry>,
        /// Back-projection normaliser, a constant `(nλ, nx, ny)` tensor.
        inv_norm: Var,
    },
}

impl Sensing {
    pub fn fixed(op: &CassiOperator) -> Self {
        Sensing::Fixed {
            phi: Rc::new(op.clone()),
            bp: Rc::new(CassiBackprojector::new(op.clone())),
            op: op.clone(),
        }
    }

    /// `keep` is an `(nx, ny)` variable whose value is the binary mask `op`
    /// was built from. Closed pixels are normalised as if they were open,
    /// which keeps their mask gradient on the scale of open ones.
    pub fn coupled(g: &mut Graph, op: &CassiOperator, keep: Var) -> Result<Self> {
        let (nx, ny, bands) = (op.nx, op.ny, op.bands);
        if g.shape(keep) != [nx, ny] {
            return Err(Error::dim(
                "coupled sensing",
                format!("mask {:?} vs {nx}x{ny}", g.shape(keep)),
            ));
        }
        let offsets = op.dispersion().offsets(bands);
        let m = g.value(keep).data.clone();
        let bp = CassiBackprojector::new(op.clone());
        let fixed = bp.inv_norm();
        let mut inv = vec![0.0; bands * nx * ny];
        for b in 0..bands {
            for r in 0..nx {
                for c in 0..ny {
                    let k = (b * nx + r) * ny + c;
                    inv[k] = if m[r * ny + c] != 0.0 {
                        fixed[k]
                    } else {
                        // ¼ Σ_b' m(r, c + o_b − o_b') with this pixel open
                        let mut s = 1.0;
                        for (b2, &o2) in offsets.iter().enumerate() {
                            let col = (c + offsets[b]).checked_sub(o2);
                            if b2 != b {
                                if let Some(col) = col.filter(|&col| col < ny) {
                                    s += m[r * ny + col];
                                }
                            }
                        }
                        4.0 / s
                    };
                }
            }
        }
        let inv_norm = g.constant(Tensor::new(vec![bands, nx, ny], inv)?);
        let geom = Rc::new(ShearGeometry {
            nx,
            ny,
            width: op.width,
            offsets,
        });
        Ok(Sensing::Coupled {
            op: op.clone(),
            keep,
            geom,
            inv_norm,
        })
    }

    pub fn op(&self) -> &CassiOperator {
        match self {
            Sensing::Fixed { op, .. } | Sensing::Coupled { op, .. } => op,
        }
    }

    /// `Φ x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Sensing::Fixed { phi, .. } => g.linear_map(x, phi.clone()),
            Sensing::Coupled { keep, geom, .. } => g.masked_shear(x, *keep, geom.clone()),
        }
    }

    /// Normalised back-projection `Φᵀ y / (ΦᵀΦ 𝟙)`.
    pub fn backproject(&self, g: &mut Graph, y: Var) -> Result<Var> {
        match self {
            Sensing::Fixed { bp, .. } => g.linear_map(y, bp.clone()),
            Sensing::Coupled {
                keep, geom, inv_norm, ..
            } => {
                let a = g.masked_unshear(y, *keep, geom.clone())?;
                g.mul(a, *inv_norm)
            }
        }
    }
}

/// Builds the full unrolled network on `g` for a measurement `yc`
/// (`(nx, width)`, possibly itself a function of trainable weights). `op`
/// is the noiseless CASSI operator of the mask in use. Returns the clamped
/// `(nλ, nx, ny)` reconstruction.
pub fn dmdc_graph(
    g: &mut Graph,
    yc: Var,
    yr: &RgbImage,
    sensing: &Sensing,
    response: &SpectralResponse,
    cfg: &NetConfig,
) -> Result<Var> {
    let op = sensing.op();
    cfg.validate()?;
    cfg.check_dims(op.nx, op.ny)?;
    if g.shape(yc) != [op.nx, op.width] || yr.nx != op.nx || yr.ny != op.ny || response.bands != op.bands {
        return Err(Error::dim(
            "dmdc_forward",
            format!(
                "measurement {:?}, rgb {}x{}, response {} bands vs operator {}x{}x{}",
                g.shape(yc),
                yr.nx,
                yr.ny,
                response.bands,
                op.nx,
                op.ny,
                op.bands
            ),
        ));
    }
    let (nx, ny, bands) = (op.nx, op.ny, op.bands);
    let rgb_feat = if cfg.with_rgb {
        let img = g.constant(Tensor::new(vec![3, nx, ny], yr.data.clone())?);
        Some(rgb_init(g, img)?)
    } else {
        None
    };

    let x0 = sensing.backproject(g, yc)?;
    let target = if cfg.with_noise_estimator {
        let xr = RgbBackprojector::new(response).apply(&yr.data, nx * ny);
        let xr = g.constant(Tensor::new(vec![bands, nx, ny], xr)?);
        let noise = noise_estimator_graph(g, x0, xr, "ne.")?;
        let noise_meas = sensing.forward(g, noise)?;
        g.sub(yc, noise_meas)?
    } else {
        yc
    };

    let mut x = x0;
    for stage in 0..cfg.stages {
        let fx = sensing.forward(g, x)?;
        let r = g.sub(target, fx)?;
        let feat = sensing.backproject(g, r)?;
        let delta = if stage == 0 {
            das_forward(g, feat, rgb_feat, cfg)?
        } else {
            sas_forward(g, feat, rgb_feat, cfg)?
        };
        x = g.add(x, delta)?;
    }
    Ok(g.clamp(x, 0.0, 1.0))
}

/// Inference: reconstructs a cube from a measurement pair.
pub fn dmdc_forward(
    yc: &CassiMeasurement,
    yr: &RgbImage,
    mask: &CodedMask,
    response: &SpectralResponse,
    params: &ModelParams,
    cfg: &NetConfig,
) -> Result<HyperspectralCube> {
    let op = CassiOperator::new(mask, &yc.dispersion, yc.bands)?;
    op.check_meas(yc, "dmdc_forward")?;
    let mut g = Graph::new(params);
    let y = g.constant(Tensor::new(vec![yc.nx, yc.width], yc.data.clone())?);
    let out = dmdc_graph(&mut g, y, yr, &Sensing::fixed(&op), response, cfg)?;
    Ok(HyperspectralCube {
        nx: yc.nx,
        ny: yc.ny,
        bands: yc.bands,
        data: g.value(out).data.clone(),
    })
}

/// `‖x_out − x_truth‖² + ξ ‖Φ x_out − y‖²` on the tape.
pub fn loss_graph(g: &mut Graph, x_out: Var, x_truth: Var, sensing: &Sensing, y: Var, xi: f64) -> Result<Var> {
    let d = g.sub(x_out, x_truth)?;
    let l = g.sum_squares(d);
    if xi == 0.0 {
        return Ok(l);
    }
    let f = sensing.forward(g, x_out)?;
    let r = g.sub(f, y)?;
    let c = g.sum_squares(r);
    let c = g.scale(c, xi);
    g.add(l, c)
}

/// Loss value and its gradient with respect to `x_out`.
pub fn loss_fn(
    x_out: &HyperspectralCube,
    x_truth: &HyperspectralCube,
    mask: &CodedMask,
    y: &CassiMeasurement,
    xi: f64,
) -> Result<(f64, Vec<f64>)> {
    if !x_out.same_dims(x_truth) {
        return Err(Error::dim(
            "loss_fn",
            format!("{:?} vs {:?}", x_out.dims(), x_truth.dims()),
        ));
    }
    let op = CassiOperator::new(mask, &y.dispersion, y.bands)?;
    op.check_cube(x_out, "loss_fn")?;
    op.check_meas(y, "loss_fn")?;
    let empty = ModelParams::new();
    let mut g = Graph::new(&empty);
    let shape = vec![x_out.bands, x_out.nx, x_out.ny];
    let xo = g.constant(Tensor::new(shape.clone(), x_out.data.clone())?);
    let xt = g.constant(Tensor::new(shape, x_truth.data.clone())?);
    let yv = g.constant(Tensor::new(vec![y.nx, y.width], y.data.clone())?);
    let l = loss_graph(&mut g, xo, xt, &Sensing::fixed(&op), yv, xi)?;
    let grads = g.backward(l)?;
    let dx = grads
        .get(xo)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x_out.data.len()]);
    Ok((g.value(l).data[0], dx))
}
