//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and enough
//! information to push a gradient back to its inputs. [`Tape::backward`]
//! walks the tape once in reverse.

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A linear map with a known transpose, usable as a tape operation.
pub trait LinearMap {
    fn in_len(&self) -> usize;
    fn out_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_t(&self, y: &[f64]) -> Vec<f64>;
}

/// Border handling for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// Geometry of a masked shear `y = Σ_b shift_b(½ m ⊙ x_b)`.
#[derive(Clone, Debug)]
pub struct ShearGeometry {
    pub nx: usize,
    pub ny: usize,
    pub width: usize,
    pub offsets: Vec<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: Padding,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftShrink(Var, Var),
    Gather(Var, Rc<[usize]>),
    Concat(Vec<Var>),
    AvgPool2(Var),
    Upsample2(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumSquares(Var),
    Linear(Var, Rc<dyn LinearMap>),
    MaskedShear {
        x: Var,
        mask: Var,
        geom: Rc<ShearGeometry>,
    },
    MaskedUnshear {
        y: Var,
        mask: Var,
        geom: Rc<ShearGeometry>,
    },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`; `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::dim(op, detail)
}

/// Source index for output coordinate `o` and kernel tap `k` of a
/// `size`-long axis with kernel radius `r`.
fn conv_src(o: usize, k: usize, r: usize, size: usize, pad: Padding) -> Option<usize> {
    let s = o as isize + k as isize - r as isize;
    match pad {
        Padding::Zero => (s >= 0 && (s as usize) < size).then_some(s as usize),
        Padding::Replicate => Some(s.clamp(0, size as isize - 1) as usize),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} to {shape:?}", self.shape(x))));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: self.value(x).data.clone(),
        };
        Ok(self.push(value, Op::Reshape(x)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.map(a, |x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    /// `a + s` with `s` a one-element tensor broadcast over `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("add_scalar", format!("{:?} is not a scalar", self.shape(s))));
        }
        let k = self.value(s).data[0];
        let v = self.map(a, |x| x + k);
        Ok(self.push(v, Op::AddScalar(a, s)))
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
        ))
    }

    /// Adds a length-`c` bias to every row of an `(n, c)` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(shape_err("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let c = sx[1];
        let bias = &self.value(b).data;
        let mut v = self.value(x).clone();
        for row in v.data.chunks_mut(c) {
            for (r, bb) in row.iter_mut().zip(bias) {
                *r += bb;
            }
        }
        Ok(self.push(v, Op::AddRowBias(x, b)))
    }

    /// Stride-1 "same" convolution. `x: (ci, h, w)`, `w: (co, ci, k, k)`
    /// with odd `k`, optional bias `(co)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} outputs", self.shape(b), sw[0]),
                ));
            }
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        let col = im2col(&self.value(x).data, ci, h, wd, k, pad);
        let mut out = matmul_raw(&self.value(w).data, &col, co, ci * k * k, h * wd);
        if let Some(b) = b {
            let bias = &self.nodes[b.0].value.data;
            for (plane, bv) in out.chunks_mut(h * wd).zip(bias) {
                plane.iter_mut().for_each(|p| *p += bv);
            }
        }
        let value = Tensor {
            shape: vec![co, h, wd],
            data: out,
        };
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }))
    }

    /// Normalises each row of `(n, c)` to zero mean and unit variance, then
    /// applies the per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let c = sx[1];
        let (xhat, inv_std) = normalize_rows(&self.value(x).data, c);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let data = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| g * v + b))
            .collect();
        let value = Tensor { shape: sx, data };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let Some(&c) = sx.last() else {
            return Err(shape_err("softmax_lastdim", "rank-0 input".into()));
        };
        if c == 0 {
            return Err(shape_err("softmax_lastdim", format!("{sx:?}")));
        }
        let mut v = self.value(x).clone();
        for row in v.data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                s += *r;
            }
            row.iter_mut().for_each(|r| *r /= s);
        }
        Ok(self.push(v, Op::Softmax(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, gelu);
        self.push(v, Op::Gelu(x))
    }

    /// `sign(x) · max(|x| − τ, 0)` with scalar threshold `tau`.
    pub fn soft_shrink(&mut self, x: Var, tau: Var) -> Result<Var> {
        if self.value(tau).len() != 1 {
            return Err(shape_err(
                "soft_shrink",
                format!("threshold {:?} is not a scalar", self.shape(tau)),
            ));
        }
        let t = self.value(tau).data[0];
        let v = self.map(x, |v| v.signum() * (v.abs() - t).max(0.0));
        Ok(self.push(v, Op::SoftShrink(x, tau)))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(shape_err(
                "gather",
                format!("{} indices into {n} values as {shape:?}", index.len()),
            ));
        }
        let src = &self.value(x).data;
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(value, Op::Gather(x, index)))
    }

    /// Flat concatenation, reshaped to `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let total: usize = parts.iter().map(|&p| self.value(p).len()).sum();
        if shape.iter().product::<usize>() != total {
            return Err(shape_err("concat", format!("{total} values as {shape:?}")));
        }
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// 2×2 average pooling of `(c, h, w)` with even `h`, `w`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(shape_err("avg_pool2", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w;
                    let v = src[base + 2 * y * w + 2 * xx]
                        + src[base + 2 * y * w + 2 * xx + 1]
                        + src[base + (2 * y + 1) * w + 2 * xx]
                        + src[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[(ch * ho + y) * wo + xx] = 0.25 * v;
                }
            }
        }
        let value = Tensor {
            shape: vec![c, ho, wo],
            data: out,
        };
        Ok(self.push(value, Op::AvgPool2(x)))
    }

    /// Nearest-neighbour ×2 upsampling of `(c, h, w)`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor {
            shape: vec![c, 2 * h, 2 * w],
            data: out,
        };
        Ok(self.push(value, Op::Upsample2(x)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.map(x, |v| v.clamp(lo, hi));
        self.push(v, Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    pub fn linear_map(&mut self, x: Var, map: Rc<dyn LinearMap>) -> Result<Var> {
        if self.value(x).len() != map.in_len() {
            return Err(shape_err(
                "linear_map",
                format!("input {:?} for a map of {} inputs", self.shape(x), map.in_len()),
            ));
        }
        let data = map.apply(&self.value(x).data);
        let value = Tensor::new(map.out_shape(), data)?;
        Ok(self.push(value, Op::Linear(x, map)))
    }

    /// `y = Σ_b shift_b(½ m ⊙ x_b)`, bilinear in the cube `x: (bands, nx, ny)`
    /// and the mask `m: (nx, ny)`.
    pub fn masked_shear(&mut self, x: Var, mask: Var, geom: Rc<ShearGeometry>) -> Result<Var> {
        let (nx, ny, w) = (geom.nx, geom.ny, geom.width);
        let bands = geom.offsets.len();
        if self.shape(x) != [bands, nx, ny] || self.shape(mask) != [nx, ny] {
            return Err(shape_err(
                "masked_shear",
                format!("cube {:?}, mask {:?}", self.shape(x), self.shape(mask)),
            ));
        }
        let (xv, mv) = (&self.value(x).data, &self.value(mask).data);
        let mut out = vec![0.0; nx * w];
        for (b, &off) in geom.offsets.iter().enumerate() {
            for r in 0..nx {
                for c in 0..ny {
                    out[r * w + off + c] += 0.5 * mv[r * ny + c] * xv[(b * nx + r) * ny + c];
                }
            }
        }
        let value = Tensor {
            shape: vec![nx, w],
            data: out,
        };
        Ok(self.push(value, Op::MaskedShear { x, mask, geom }))
    }

    /// Adjoint of [`Tape::masked_shear`] in its cube argument:
    /// `x_b(r, c) = ½ m(r, c) y(r, c + o_b)`, differentiable in `y` and `m`.
    pub fn masked_unshear(&mut self, y: Var, mask: Var, geom: Rc<ShearGeometry>) -> Result<Var> {
        let (nx, ny, w) = (geom.nx, geom.ny, geom.width);
        let bands = geom.offsets.len();
        if self.shape(y) != [nx, w] || self.shape(mask) != [nx, ny] {
            return Err(shape_err(
                "masked_unshear",
                format!("measurement {:?}, mask {:?}", self.shape(y), self.shape(mask)),
            ));
        }
        let (yv, mv) = (&self.value(y).data, &self.value(mask).data);
        let mut out = vec![0.0; bands * nx * ny];
        for (b, &off) in geom.offsets.iter().enumerate() {
            for r in 0..nx {
                for c in 0..ny {
                    out[(b * nx + r) * ny + c] = 0.5 * mv[r * ny + c] * yv[r * w + off + c];
                }
            }
        }
        let value = Tensor {
            shape: vec![bands, nx, ny],
            data: out,
        };
        Ok(self.push(value, Op::MaskedUnshear { y, mask, geom }))
    }

    /// `1[p < threshold]` forward, `−1` gradient backward: a
    /// straight-through estimator for "keep" masks thresholded from a
    /// removal probability.
    pub fn keep_below(&mut self, p: Var, threshold: f64) -> Var {
        let v = self.map(p, |v| if v < threshold { 1.0 } else { 0.0 });
        self.push(v, Op::StraightThrough(p))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("root {:?} is not a scalar", self.shape(root)),
            ));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        slots[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            self.backprop_node(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn backprop_node(&self, i: usize, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = slots[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &self.nodes[v.0].value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)),
            Op::AddScalar(a, sc) => {
                acc(*a, &mut |s| add_into(s, g));
                let total: f64 = g.iter().sum();
                acc(*sc, &mut |s| s[0] += total);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for c in 0..k {
                            let mut t = 0.0;
                            for j in 0..n {
                                t += g[r * n + j] * vb[c * n + j];
                            }
                            s[r * k + c] += t;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..m {
                        for c in 0..k {
                            let av = va[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let srow = &mut s[c * n..(c + 1) * n];
                            for (sv, gv) in srow.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *sv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |s| add_into(s, g));
                let c = self.nodes[b.0].value.len();
                acc(*b, &mut |s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::Conv2d { x, w, b, pad } => {
                let sx = &self.nodes[x.0].value.shape;
                let sw = &self.nodes[w.0].value.shape;
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let k = sw[2];
                let (kk, hw) = (ci * k * k, h * wd);
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for (sv, gp) in s.iter_mut().zip(g.chunks(hw)) {
                            *sv += gp.iter().sum::<f64>();
                        }
                    });
                }
                let col = im2col(val(*x), ci, h, wd, k, *pad);
                // dW = G colᵀ
                acc(*w, &mut |s| {
                    for (o, gp) in g.chunks(hw).enumerate() {
                        for (j, cr) in col.chunks(hw).enumerate() {
                            s[o * kk + j] += gp.iter().zip(cr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                // dcol = Wᵀ G, scattered back through the patch map
                let ker = val(*w);
                let mut dcol = vec![0.0; kk * hw];
                for (o, gp) in g.chunks(hw).enumerate() {
                    for (j, dr) in dcol.chunks_mut(hw).enumerate() {
                        let kv = ker[o * kk + j];
                        if kv != 0.0 {
                            dr.iter_mut().zip(gp).for_each(|(d, g)| *d += kv * g);
                        }
                    }
                }
                acc(*x, &mut |s| col2im_add(&dcol, s, ci, h, wd, k, *pad));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.nodes[gamma.0].value.len();
                let gam = val(*gamma);
                acc(*gamma, &mut |s| {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((s, g), x) in s.iter_mut().zip(gr).zip(xr) {
                            *s += g * x;
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gr in g.chunks(c) {
                        add_into(s, gr);
                    }
                });
                acc(*x, &mut |s| {
                    for (row, ((gr, xr), is)) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std).enumerate() {
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            s[row * c + j] += is / cf * (cf * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = *node.value.shape.last().expect("rank ≥ 1");
                let y = &node.value.data;
                acc(*x, &mut |s| {
                    for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                        *s += g * y * (1.0 - y);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                        *s += g * gelu_grad(*x);
                    }
                });
            }
            Op::SoftShrink(x, tau) => {
                let xv = val(*x);
                let t = val(*tau)[0];
                acc(*x, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                        if x.abs() > t {
                            *s += g;
                        }
                    }
                });
                let dt: f64 = g
                    .iter()
                    .zip(xv)
                    .filter(|(_, x)| x.abs() > t)
                    .map(|(g, x)| -g * x.signum())
                    .sum();
                acc(*tau, &mut |s| s[0] += dt);
            }
            Op::Gather(x, index) => acc(*x, &mut |s| {
                for (g, &i) in g.iter().zip(index.iter()) {
                    s[i] += g;
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(*p, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::AvgPool2(x) => {
                let s0 = &self.nodes[x.0].value.shape;
                let (c, h, w) = (s0[0], s0[1], s0[2]);
                let (ho, wo) = (h / 2, w / 2);
                acc(*x, &mut |s| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                s[(ch * h + y) * w + xx] += 0.25 * g[(ch * ho + y / 2) * wo + xx / 2];
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let s0 = &self.nodes[x.0].value.shape;
                let (c, h, w) = (s0[0], s0[1], s0[2]);
                acc(*x, &mut |s| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                s[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                        if *x > *lo && *x < *hi {
                            *s += g;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SumSquares(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for (s, x) in s.iter_mut().zip(xv) {
                        *s += 2.0 * x * g[0];
                    }
                });
            }
            Op::Linear(x, map) => {
                let back = map.apply_t(g);
                acc(*x, &mut |s| add_into(s, &back));
            }
            Op::MaskedShear { x, mask, geom } => {
                let (nx, ny, w) = (geom.nx, geom.ny, geom.width);
                let (xv, mv) = (val(*x), val(*mask));
                acc(*x, &mut |s| {
                    for (b, &off) in geom.offsets.iter().enumerate() {
                        for r in 0..nx {
                            for c in 0..ny {
                                s[(b * nx + r) * ny + c] += 0.5 * mv[r * ny + c] * g[r * w + off + c];
                            }
                        }
                    }
                });
                acc(*mask, &mut |s| {
                    for (b, &off) in geom.offsets.iter().enumerate() {
                        for r in 0..nx {
                            for c in 0..ny {
                                s[r * ny + c] += 0.5 * xv[(b * nx + r) * ny + c] * g[r * w + off + c];
                            }
                        }
                    }
                });
            }
            Op::MaskedUnshear { y, mask, geom } => {
                let (nx, ny, w) = (geom.nx, geom.ny, geom.width);
                let (yv, mv) = (val(*y), val(*mask));
                acc(*y, &mut |s| {
                    for (b, &off) in geom.offsets.iter().enumerate() {
                        for r in 0..nx {
                            for c in 0..ny {
                                s[r * w + off + c] += 0.5 * mv[r * ny + c] * g[(b * nx + r) * ny + c];
                            }
                        }
                    }
                });
                acc(*mask, &mut |s| {
                    for (b, &off) in geom.offsets.iter().enumerate() {
                        for r in 0..nx {
                            for c in 0..ny {
                                s[r * ny + c] += 0.5 * yv[r * w + off + c] * g[(b * nx + r) * ny + c];
                            }
                        }
                    }
                });
            }
            Op::StraightThrough(p) => acc(*p, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Patch matrix `(ci·k·k) × (h·w)`: row `(i, ky, kx)` holds channel `i`
/// shifted by `(ky − r, kx − r)`.
fn im2col(x: &[f64], ci: usize, h: usize, w: usize, k: usize, pad: Padding) -> Vec<f64> {
    if k == 1 {
        return x.to_vec();
    }
    let r = k / 2;
    let hw = h * w;
    let mut col = vec![0.0; ci * k * k * hw];
    for i in 0..ci {
        let src = &x[i * hw..(i + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((i * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let Some(sy) = conv_src(y, ky, r, h, pad) else { continue };
                    let dst = &mut row[y * w..(y + 1) * w];
                    let s = &src[sy * w..(sy + 1) * w];
                    for (c, d) in dst.iter_mut().enumerate() {
                        if let Some(sc) = conv_src(c, kx, r, w, pad) {
                            *d = s[sc];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im_add(col: &[f64], dx: &mut [f64], ci: usize, h: usize, w: usize, k: usize, pad: Padding) {
    if k == 1 {
        add_into(dx, col);
        return;
    }
    let r = k / 2;
    let hw = h * w;
    for i in 0..ci {
        let dst = &mut dx[i * hw..(i + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((i * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let Some(sy) = conv_src(y, ky, r, h, pad) else { continue };
                    for c in 0..w {
                        if let Some(sc) = conv_src(c, kx, r, w, pad) {
                            dst[sy * w + sc] += row[y * w + c];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-wise standardisation, returning `(x̂, 1/σ)` per row.
pub(crate) fn normalize_rows(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / c.max(1));
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        xhat.extend(row.iter().map(|v| (v - mean) * is));
        inv.push(is);
    }
    (xhat, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_gradients, random_tensor};

    fn scalar_loss(tape: &mut Tape, out: Var, seed: u64) -> Var {
        // random projection so every output element matters
        let r = random_tensor(tape.shape(out), seed);
        let w = tape.leaf(r);
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(random_tensor(&[5, 7], 1));
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(&[2, 6], 3.5));
        let g = t.leaf(Tensor::filled(&[6], 1.0));
        let b = t.leaf(Tensor::zeros(&[6]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_standardises() {
        let mut t = Tape::new();
        let x = t.leaf(random_tensor(&[4, 9], 3));
        let g = t.leaf(Tensor::filled(&[9], 1.0));
        let b = t.leaf(Tensor::zeros(&[9]));
        let y = t.layer_norm(x, g, b).unwrap();
        for row in t.value(y).data.chunks(9) {
            let m = row.iter().sum::<f64>() / 9.0;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-6);
            // ε = 1e-5 in the denominator
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let w = t.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        let err = t.conv2d(a, w, None, Padding::Zero).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn gradcheck_matmul() {
        check_gradients(&[&[3, 4], &[4, 5]], 11, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(scalar_loss(t, y, 99))
        });
    }

    #[test]
    fn gradcheck_conv3x3_zero_and_replicate() {
        for pad in [Padding::Zero, Padding::Replicate] {
            check_gradients(&[&[2, 5, 4], &[3, 2, 3, 3], &[3]], 12, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), pad)?;
                Ok(scalar_loss(t, y, 98))
            });
        }
    }

    #[test]
    fn gradcheck_layer_norm() {
        check_gradients(&[&[3, 6], &[6], &[6]], 13, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            Ok(scalar_loss(t, y, 97))
        });
    }

    #[test]
    fn gradcheck_softmax() {
        check_gradients(&[&[4, 5]], 14, |t, v| {
            let y = t.softmax(v[0])?;
            Ok(scalar_loss(t, y, 96))
        });
    }

    #[test]
    fn gradcheck_sigmoid_gelu() {
        check_gradients(&[&[10]], 15, |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.gelu(v[0]);
            let y = t.add(a, b)?;
            Ok(scalar_loss(t, y, 95))
        });
    }

    #[test]
    fn gradcheck_soft_shrink() {
        // inputs drawn away from ±τ so the kink is not straddled
        check_gradients(&[&[12], &[1]], 16, |t, v| {
            let y = t.soft_shrink(v[0], v[1])?;
            Ok(scalar_loss(t, y, 94))
        });
    }

    #[test]
    fn gradcheck_structural_ops() {
        check_gradients(&[&[2, 4, 4], &[1]], 17, |t, v| {
            let p = t.avg_pool2(v[0])?;
            let u = t.upsample2(p)?;
            let s = t.add_scalar(u, v[1])?;
            let idx: Rc<[usize]> = (0..32).rev().collect::<Vec<_>>().into();
            let g = t.gather(s, idx, &[32])?;
            let c = t.concat(&[g, g], &[64])?;
            let q = t.sum_squares(c);
            let l = scalar_loss(t, c, 93);
            t.add(q, l)
        });
    }

    #[test]
    fn gradcheck_masked_shear() {
        let geom = Rc::new(ShearGeometry {
            nx: 3,
            ny: 4,
            width: 6,
            offsets: vec![0, 1, 2],
        });
        check_gradients(&[&[3, 3, 4], &[3, 4]], 18, move |t, v| {
            let y = t.masked_shear(v[0], v[1], geom.clone())?;
            Ok(scalar_loss(t, y, 92))
        });
    }

    #[test]
    fn gradcheck_masked_unshear() {
        let geom = Rc::new(ShearGeometry {
            nx: 3,
            ny: 4,
            width: 6,
            offsets: vec![0, 1, 2],
        });
        check_gradients(&[&[3, 6], &[3, 4]], 19, move |t, v| {
            let x = t.masked_unshear(v[0], v[1], geom.clone())?;
            Ok(scalar_loss(t, x, 94))
        });
    }

    #[test]
    fn unshear_is_adjoint_of_shear() {
        let geom = Rc::new(ShearGeometry {
            nx: 3,
            ny: 4,
            width: 7,
            offsets: vec![0, 2, 3],
        });
        let mut t = Tape::new();
        let x = t.leaf(random_tensor(&[3, 3, 4], 1));
        let y = t.leaf(random_tensor(&[3, 7], 2));
        let m = t.leaf(random_tensor(&[3, 4], 3));
        let fx = t.masked_shear(x, m, geom.clone()).unwrap();
        let aty = t.masked_unshear(y, m, geom).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>();
        let (l, r) = (dot(t.value(fx), t.value(y)), dot(t.value(x), t.value(aty)));
        assert!((l - r).abs() < 1e-12 * l.abs().max(1.0));
    }

    #[test]
    fn straight_through_passes_negated_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::new(vec![3], vec![0.2, 0.5, 0.9]).unwrap());
        let m = t.keep_below(p, 0.5);
        assert_eq!(t.value(m).data, vec![1.0, 0.0, 0.0]);
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[-1.0, -1.0, -1.0]);
    }
}
