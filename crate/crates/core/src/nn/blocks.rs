//! Attention blocks over token matrices `(N, C)` with `N = nx·ny` tokens in
//! row-major pixel order.
//!
//! Parameter names are relative to a block prefix:
//!
//! ```text
//! ln.g ln.b              pre-attention layer norm
//! q.w k.w v.w            C × C projections
//! o.w o.b                output projection
//! ffn.ln.g ffn.ln.b      pre-FFN layer norm
//! ffn.fc1.w ffn.fc1.b    C → 2C
//! ffn.fc2.w ffn.fc2.b    2C → C
//! ```

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::params::{Graph, Init, ModelParams};
use crate::nn::tape::{Tensor, Var};

/// FFN hidden width as a multiple of the embedding width.
pub const FFN_MULT: usize = 2;

pub fn transpose(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::dim("transpose", format!("{s:?}")));
    }
    let (m, n) = (s[0], s[1]);
    let idx: Rc<[usize]> = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
    g.gather(x, idx, &[n, m])
}

/// `(C, nx, ny)` cube to `(nx·ny, C)` tokens.
pub fn to_tokens(g: &mut Graph, cube: Var) -> Result<Var> {
    let s = g.shape(cube).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("to_tokens", format!("{s:?}")));
    }
    let flat = g.reshape(cube, &[s[0], s[1] * s[2]])?;
    transpose(g, flat)
}

/// `(nx·ny, C)` tokens to a `(C, nx, ny)` cube.
pub fn to_cube(g: &mut Graph, tokens: Var, nx: usize, ny: usize) -> Result<Var> {
    let t = transpose(g, tokens)?;
    let c = g.shape(t)[0];
    g.reshape(t, &[c, nx, ny])
}

/// `x W + b` with `{prefix}w: (cin, cout)` and `{prefix}b: (cout)`.
pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}w"))?;
    let b = g.param(&format!("{prefix}b"))?;
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}g"))?;
    let beta = g.param(&format!("{prefix}b"))?;
    g.layer_norm(x, gamma, beta)
}

/// `x + FC2(GELU(FC1(LN(x))))`.
pub fn ffn(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let n = layer_norm(g, x, &format!("{prefix}ln."))?;
    let h = linear(g, n, &format!("{prefix}fc1."))?;
    let h = g.gelu(h);
    let o = linear(g, h, &format!("{prefix}fc2."))?;
    g.add(x, o)
}

pub fn init_linear(
    p: &mut ModelParams,
    prefix: &str,
    cin: usize,
    cout: usize,
    gain: f64,
    init: &mut Init,
) -> Result<()> {
    p.insert(format!("{prefix}w"), init.fan_in(&[cin, cout], cin, gain))?;
    p.insert(format!("{prefix}b"), Tensor::zeros(&[cout]))
}

fn init_ln(p: &mut ModelParams, prefix: &str, c: usize) -> Result<()> {
    p.insert(format!("{prefix}g"), Tensor::filled(&[c], 1.0))?;
    p.insert(format!("{prefix}b"), Tensor::zeros(&[c]))
}

/// Weights for any of the three attention blocks.
pub fn init_block(p: &mut ModelParams, prefix: &str, c: usize, init: &mut Init) -> Result<()> {
    init_ln(p, &format!("{prefix}ln."), c)?;
    for name in ["q", "k", "v"] {
        p.insert(format!("{prefix}{name}.w"), init.fan_in(&[c, c], c, 1.0))?;
    }
    init_linear(p, &format!("{prefix}o."), c, c, 1.0, init)?;
    init_ln(p, &format!("{prefix}ffn.ln."), c)?;
    init_linear(p, &format!("{prefix}ffn.fc1."), c, FFN_MULT * c, 1.0, init)?;
    init_linear(p, &format!("{prefix}ffn.fc2."), FFN_MULT * c, c, 1.0, init)
}

fn check_heads(op: &'static str, c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::dim(op, format!("{c} channels do not split into {heads} heads")));
    }
    Ok(c / heads)
}

/// Channel-token attention: per head, `A = softmax(Q_hᵀ K_h / N)` is a
/// `dh × dh` map between channels and `out_h = V_h Aᵀ`. Scaling by the
/// token count keeps the logits O(1) at any image size.
fn channel_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (n, c) = (g.shape(q)[0], g.shape(q)[1]);
    let dh = c / heads;
    let qt = transpose(g, q)?;
    let s = g.matmul(qt, k)?;
    let s = g.scale(s, 1.0 / n as f64);
    // row i of head h keeps columns h·dh .. (h+1)·dh
    let blocks: Rc<[usize]> = (0..c)
        .flat_map(|i| (0..dh).map(move |j| i * c + (i / dh) * dh + j))
        .collect();
    let s = g.gather(s, blocks, &[c, dh])?;
    let a = g.softmax(s)?;
    // block-diagonal Aᵀ: (j, i) ← A[i, j − h·dh] within a head, else 0
    let zero = g.constant(Tensor::scalar(0.0));
    let padded = g.concat(&[a, zero], &[c * dh + 1])?;
    let at: Rc<[usize]> = (0..c)
        .flat_map(|j| (0..c).map(move |i| if i / dh == j / dh { i * dh + j % dh } else { c * dh }))
        .collect();
    let at = g.gather(padded, at, &[c, c])?;
    g.matmul(v, at)
}

/// Shared body of the spectral and cross blocks: queries from `q_stream`,
/// keys and values from `kv_stream`, one layer norm for both.
fn channel_block(
    g: &mut Graph,
    q_stream: Var,
    kv_stream: Var,
    prefix: &str,
    heads: usize,
    op: &'static str,
) -> Result<Var> {
    let s = g.shape(q_stream).to_vec();
    if s.len() != 2 || g.shape(kv_stream) != s.as_slice() {
        return Err(Error::dim(op, format!("{s:?} vs {:?}", g.shape(kv_stream))));
    }
    check_heads(op, s[1], heads)?;
    let ln = format!("{prefix}ln.");
    let qn = layer_norm(g, q_stream, &ln)?;
    let kvn = if kv_stream == q_stream {
        qn
    } else {
        layer_norm(g, kv_stream, &ln)?
    };
    let wq = g.param(&format!("{prefix}q.w"))?;
    let wk = g.param(&format!("{prefix}k.w"))?;
    let wv = g.param(&format!("{prefix}v.w"))?;
    let q = g.matmul(qn, wq)?;
    let k = g.matmul(kvn, wk)?;
    let v = g.matmul(kvn, wv)?;
    let att = channel_attention(g, q, k, v, heads)?;
    let o = linear(g, att, &format!("{prefix}o."))?;
    let y = g.add(q_stream, o)?;
    ffn(g, y, &format!("{prefix}ffn."))
}

/// Self-attention across channels, plus residual and FFN.
pub fn spectral_ab(g: &mut Graph, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    channel_block(g, x, x, prefix, heads, "spectral_ab")
}

/// Channel attention with queries from `q_stream` and keys/values from
/// `kv_stream`; the residual is onto `q_stream`.
pub fn cross_ab(g: &mut Graph, q_stream: Var, kv_stream: Var, prefix: &str, heads: usize) -> Result<Var> {
    channel_block(g, q_stream, kv_stream, prefix, heads, "cross_ab")
}

/// Token ids of window `(wx, wy)` in row-major order.
fn window_tokens(ny: usize, window: usize, wx: usize, wy: usize) -> Vec<usize> {
    (0..window)
        .flat_map(|i| (0..window).map(move |j| (wx * window + i) * ny + wy * window + j))
        .collect()
}

/// Windowed multi-head self-attention over pixels, plus residual and FFN.
pub fn spatial_ab(
    g: &mut Graph,
    x: Var,
    nx: usize,
    ny: usize,
    window: usize,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != nx * ny {
        return Err(Error::dim("spatial_ab", format!("{s:?} for a {nx}x{ny} image")));
    }
    if window == 0 || !nx.is_multiple_of(window) || !ny.is_multiple_of(window) {
        return Err(Error::dim(
            "spatial_ab",
            format!("window {window} does not divide {nx}x{ny}"),
        ));
    }
    let c = s[1];
    let dh = check_heads("spatial_ab", c, heads)?;
    let xn = layer_norm(g, x, &format!("{prefix}ln."))?;
    let wq = g.param(&format!("{prefix}q.w"))?;
    let wk = g.param(&format!("{prefix}k.w"))?;
    let wv = g.param(&format!("{prefix}v.w"))?;
    let q = g.matmul(xn, wq)?;
    let k = g.matmul(xn, wk)?;
    let v = g.matmul(xn, wv)?;
    let t = window * window;
    let scale = 1.0 / (dh as f64).sqrt();
    let (gx, gy) = (nx / window, ny / window);
    let mut parts = Vec::with_capacity(gx * gy * heads);
    let mut order = vec![0usize; nx * ny * c];
    for wx in 0..gx {
        for wy in 0..gy {
            let toks = window_tokens(ny, window, wx, wy);
            for h in 0..heads {
                let rows: Rc<[usize]> = toks
                    .iter()
                    .flat_map(|&tk| (0..dh).map(move |j| tk * c + h * dh + j))
                    .collect();
                let cols: Rc<[usize]> = (0..dh)
                    .flat_map(|j| toks.iter().map(move |&tk| tk * c + h * dh + j))
                    .collect();
                let qw = g.gather(q, rows.clone(), &[t, dh])?;
                let kt = g.gather(k, cols, &[dh, t])?;
                let vw = g.gather(v, rows, &[t, dh])?;
                let sc = g.matmul(qw, kt)?;
                let sc = g.scale(sc, scale);
                let a = g.softmax(sc)?;
                let o = g.matmul(a, vw)?;
                let base = parts.len() * t * dh;
                for (ti, &tk) in toks.iter().enumerate() {
                    for j in 0..dh {
                        order[tk * c + h * dh + j] = base + ti * dh + j;
                    }
                }
                parts.push(o);
            }
        }
    }
    let all = g.concat(&parts, &[nx * ny * c])?;
    let att = g.gather(all, order.into(), &[nx * ny, c])?;
    let o = linear(g, att, &format!("{prefix}o."))?;
    let y = g.add(x, o)?;
    ffn(g, y, &format!("{prefix}ffn."))
}
