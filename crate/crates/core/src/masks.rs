//! Coded apertures: fixed template, random, clipped-normal and RGB-driven
//! dynamic masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::params::{Graph, Init, ModelParams};
use crate::nn::tape::{Padding, Tensor, Var};
use crate::spectral::RgbImage;

#[derive(Clone, Debug, PartialEq)]
pub struct CodedMask {
    pub nx: usize,
    pub ny: usize,
    /// Row-major `nx × ny`, each value in `[0, 1]`.
    pub data: Vec<f64>,
    /// Every value is exactly 0 or 1.
    pub binary: bool,
}

impl CodedMask {
    pub fn filled(nx: usize, ny: usize, value: f64) -> Self {
        CodedMask {
            nx,
            ny,
            data: vec![value; nx * ny],
            binary: value == 0.0 || value == 1.0,
        }
    }

    /// Validates range and sets the binary flag from the data.
    pub fn from_vec(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny {
            return Err(Error::dim("mask", format!("{} values for {nx}x{ny}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param(format!("mask value {} at {i} outside [0, 1]", data[i])));
        }
        let binary = data.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(CodedMask { nx, ny, data, binary })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.ny + y]
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == self.nx * self.ny
            && self.data.iter().all(|v| (0.0..=1.0).contains(v))
            && (!self.binary || self.data.iter().all(|&v| v == 0.0 || v == 1.0))
    }
}

fn bernoulli(nx: usize, ny: usize, p: f64, seed: u64) -> CodedMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..nx * ny)
        .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    CodedMask {
        nx,
        ny,
        data,
        binary: true,
    }
}

/// Fixed binary Bernoulli(`open_ratio`) pattern. Also serves as the
/// template the dynamic mask net builds on.
pub fn template_mask(nx: usize, ny: usize, open_ratio: f64, seed: u64) -> Result<CodedMask> {
    if !(open_ratio > 0.0 && open_ratio < 1.0) {
        return Err(Error::param(format!("open ratio must lie in (0, 1), got {open_ratio}")));
    }
    Ok(bernoulli(nx, ny, open_ratio, seed))
}

/// Binary Bernoulli(0.5), meant to be redrawn per scene.
pub fn random_mask(nx: usize, ny: usize, seed: u64) -> CodedMask {
    // separate stream so a random mask never coincides with a template of the same seed
    bernoulli(nx, ny, 0.5, crate::optics::derive_seed(seed, 0x6d61_736b))
}

/// Continuous mask of N(0.5, 0.25²) samples clipped to `[0, 1]`.
pub fn normal_mask(nx: usize, ny: usize, seed: u64) -> CodedMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::<f64>::new(0.5, 0.25).expect("valid normal");
    let data = (0..nx * ny).map(|_| d.sample(&mut rng).clamp(0.0, 1.0)).collect();
    CodedMask {
        nx,
        ny,
        data,
        binary: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStats {
    /// Mean transmission.
    pub open_ratio: f64,
    /// Population variance of the per-row mean transmission.
    pub row_variance: f64,
}

pub fn mask_stats(mask: &CodedMask) -> MaskStats {
    let total: f64 = mask.data.iter().sum();
    let rows: Vec<f64> = mask
        .data
        .chunks(mask.ny)
        .map(|r| r.iter().sum::<f64>() / mask.ny as f64)
        .collect();
    let mean = rows.iter().sum::<f64>() / rows.len() as f64;
    MaskStats {
        open_ratio: total / mask.data.len() as f64,
        row_variance: rows.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rows.len() as f64,
    }
}

/// Keep rule: `p` is the probability a pixel is redundant; pixels below the
/// threshold stay open.
#[inline]
pub fn keep_pixel(p: f64, threshold: f64) -> bool {
    p < threshold
}

/// Weights of the RGB-driven mask net.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMaskParams {
    pub channels: usize,
    pub threshold: f64,
    pub weights: ModelParams,
}

const CONVS: [&str; 5] = ["enc1", "enc2", "mid", "dec2", "dec1"];

impl DynamicMaskParams {
    pub fn init(channels: usize, threshold: f64, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("mask net needs at least one channel"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::param(format!("threshold must lie in (0, 1), got {threshold}")));
        }
        let mut init = Init::new(seed);
        let mut w = ModelParams::new();
        let c = channels;
        w.insert("mask.in.w", init.fan_in(&[c, 3, 1, 1], 3, 1.0))?;
        w.insert("mask.in.b", Tensor::zeros(&[c]))?;
        for name in CONVS {
            w.insert(format!("mask.{name}.w"), init.fan_in(&[c, c, 3, 3], 9 * c, 1.0))?;
            w.insert(format!("mask.{name}.b"), Tensor::zeros(&[c]))?;
        }
        w.insert("mask.head.w", init.fan_in(&[1, c, 3, 3], 9 * c, 0.5))?;
        w.insert("mask.head.b", Tensor::zeros(&[1]))?;
        Ok(DynamicMaskParams {
            channels,
            threshold,
            weights: w,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) || self.channels == 0 {
            return Err(Error::param("mask net needs channels ≥ 1 and threshold in (0, 1)"));
        }
        Ok(())
    }
}

fn check_rgb_template(rgb: &RgbImage, template: &CodedMask) -> Result<()> {
    if rgb.nx != template.nx || rgb.ny != template.ny {
        return Err(Error::dim(
            "dynamic_mask",
            format!("rgb {}x{} vs template {}x{}", rgb.nx, rgb.ny, template.nx, template.ny),
        ));
    }
    if !rgb.nx.is_multiple_of(4) || !rgb.ny.is_multiple_of(4) {
        return Err(Error::dim(
            "dynamic_mask",
            format!("{}x{} is not divisible by 4", rgb.nx, rgb.ny),
        ));
    }
    Ok(())
}

fn conv_gelu(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("mask.{name}.w"))?;
    let b = g.param(&format!("mask.{name}.b"))?;
    let y = g.conv2d(x, w, Some(b), Padding::Replicate)?;
    Ok(g.gelu(y))
}

/// Builds the removal-probability map `(1, nx, ny)` on `g`. Mask-net weights
/// must be present in the graph's parameter store.
pub fn mask_probability_graph(g: &mut Graph, rgb: &RgbImage, template: &CodedMask, channels: usize) -> Result<Var> {
    check_rgb_template(rgb, template)?;
    let (nx, ny) = (rgb.nx, rgb.ny);
    let x = g.constant(Tensor::new(vec![3, nx, ny], rgb.data.clone())?);
    let tpl = g.constant(Tensor::new(
        vec![channels, nx, ny],
        template.data.iter().cycle().take(channels * nx * ny).cloned().collect(),
    )?);
    let (w, b) = (g.param("mask.in.w")?, g.param("mask.in.b")?);
    let lifted = g.conv2d(x, w, Some(b), Padding::Replicate)?;
    let feat = g.add(lifted, tpl)?;

    let e1 = conv_gelu(g, feat, "enc1")?;
    let p1 = g.avg_pool2(e1)?;
    let e2 = conv_gelu(g, p1, "enc2")?;
    let p2 = g.avg_pool2(e2)?;
    let m = conv_gelu(g, p2, "mid")?;
    let u2 = g.upsample2(m)?;
    let s2 = g.add(u2, e2)?;
    let d2 = conv_gelu(g, s2, "dec2")?;
    let u1 = g.upsample2(d2)?;
    let s1 = g.add(u1, e1)?;
    let d1 = conv_gelu(g, s1, "dec1")?;

    let (hw, hb) = (g.param("mask.head.w")?, g.param("mask.head.b")?);
    let logits = g.conv2d(d1, hw, Some(hb), Padding::Replicate)?;
    Ok(g.sigmoid(logits))
}

/// Removal probability per pixel, row-major `nx × ny`.
pub fn mask_probability(rgb: &RgbImage, template: &CodedMask, params: &DynamicMaskParams) -> Result<Vec<f64>> {
    params.validate()?;
    let mut g = Graph::new(&params.weights);
    let p = mask_probability_graph(&mut g, rgb, template, params.channels)?;
    Ok(g.value(p).data.clone())
}

/// Binary mask keeping pixels whose removal probability is below the threshold.
pub fn dynamic_mask(rgb: &RgbImage, template: &CodedMask, params: &DynamicMaskParams) -> Result<CodedMask> {
    let p = mask_probability(rgb, template, params)?;
    let data = p
        .iter()
        .map(|&v| if keep_pixel(v, params.threshold) { 1.0 } else { 0.0 })
        .collect();
    Ok(CodedMask {
        nx: rgb.nx,
        ny: rgb.ny,
        data,
        binary: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_open_ratio() {
        let m = template_mask(64, 64, 0.5, 3).unwrap();
        let frac = m.data.iter().sum::<f64>() / 4096.0;
        assert!((0.4..=0.6).contains(&frac));
        assert!(m.binary && m.is_valid());
        assert_eq!(m, template_mask(64, 64, 0.5, 3).unwrap());
        assert!(template_mask(4, 4, 1.0, 0).is_err());
        assert!(template_mask(4, 4, 0.0, 0).is_err());
    }

    #[test]
    fn random_masks_vary_by_seed() {
        let a = random_mask(64, 64, 1);
        let b = random_mask(64, 64, 2);
        assert_ne!(a, b);
        assert!(a.binary);
        let mean = a.data.iter().sum::<f64>() / 4096.0;
        assert!((0.4..=0.6).contains(&mean));
    }

    #[test]
    fn normal_mask_is_continuous() {
        let m = normal_mask(64, 64, 5);
        assert!(!m.binary && m.is_valid());
        let mean = m.data.iter().sum::<f64>() / 4096.0;
        assert!((0.45..=0.55).contains(&mean));
    }

    #[test]
    fn stats() {
        let s = mask_stats(&CodedMask::filled(5, 7, 1.0));
        assert_eq!((s.open_ratio, s.row_variance), (1.0, 0.0));
        let data = (0..36).map(|i| ((i / 6 + i % 6) % 2) as f64).collect();
        let cb = CodedMask::from_vec(6, 6, data).unwrap();
        assert_eq!(mask_stats(&cb).open_ratio, 0.5);
    }

    fn rgb_const(nx: usize, ny: usize, v: [f64; 3]) -> RgbImage {
        let mut data = Vec::new();
        for c in v {
            data.extend(std::iter::repeat_n(c, nx * ny));
        }
        RgbImage::from_vec(nx, ny, data).unwrap()
    }

    #[test]
    fn zero_head_gives_half_and_closed_mask() {
        let mut p = DynamicMaskParams::init(4, 0.5, 1).unwrap();
        for name in ["mask.head.w", "mask.head.b"] {
            let e = p.weights.entry_mut(name).unwrap();
            e.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let rgb = rgb_const(8, 8, [0.1, 0.3, 0.2]);
        let tpl = template_mask(8, 8, 0.5, 2).unwrap();
        let prob = mask_probability(&rgb, &tpl, &p).unwrap();
        assert!(prob.iter().all(|&v| v == 0.5));
        let m = dynamic_mask(&rgb, &tpl, &p).unwrap();
        assert!(m.binary && m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_inputs_give_constant_map() {
        let p = DynamicMaskParams::init(4, 0.5, 1).unwrap();
        let rgb = rgb_const(8, 8, [0.4, 0.1, 0.2]);
        let tpl = CodedMask::filled(8, 8, 1.0);
        let prob = mask_probability(&rgb, &tpl, &p).unwrap();
        assert!(prob.iter().all(|v| (v - prob[0]).abs() < 1e-12));
    }

    #[test]
    fn mask_follows_probability_map() {
        let p = DynamicMaskParams::init(4, 0.5, 7).unwrap();
        let mut rgb = rgb_const(8, 8, [0.0; 3]);
        for (i, v) in rgb.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 / 11.0;
        }
        let tpl = template_mask(8, 8, 0.5, 3).unwrap();
        let prob = mask_probability(&rgb, &tpl, &p).unwrap();
        let m = dynamic_mask(&rgb, &tpl, &p).unwrap();
        for (pv, mv) in prob.iter().zip(&m.data) {
            assert_eq!(*mv == 1.0, *pv < 0.5);
        }
    }

    #[test]
    fn rejects_mismatched_or_odd_dims() {
        let p = DynamicMaskParams::init(2, 0.5, 1).unwrap();
        let tpl = CodedMask::filled(8, 8, 1.0);
        assert!(dynamic_mask(&rgb_const(8, 4, [0.0; 3]), &tpl, &p).is_err());
        let tpl = CodedMask::filled(6, 6, 1.0);
        assert!(dynamic_mask(&rgb_const(6, 6, [0.0; 3]), &tpl, &p).is_err());
    }
}
