//! Parameterised layers shared by the attention blocks, encoders and heads.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// `y = x W + b`, applied row-wise to `[m, in]` or to a single `[in]` vector.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = ps.shared_uniform(&format!("{name}.weight"), &[in_dim, out_dim], in_dim)?;
        let bias = if bias {
            Some(ps.get_or_insert_with(&format!("{name}.bias"), |ps| {
                ps.zeros(&format!("{name}.bias"), &[out_dim])
            })?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let vector = shape.len() == 1;
        let x2 = if vector { g.reshape(x, &[1, shape[0]])? } else { x };
        if g.shape(x2).len() != 2 {
            return Err(shape_err("linear", format!("input {shape:?}")));
        }
        let w = g.param(self.weight);
        let mut y = g.matmul(x2, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_bias(y, b)?;
        }
        if vector {
            y = g.reshape(y, &[self.out_dim])?;
        }
        Ok(y)
    }

    /// Applies the layer at every position of a channels-last map.
    pub fn forward_map(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = g.value(x).len() / c;
        let flat = g.reshape(x, &[rows, c])?;
        let y = self.forward(g, flat)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

/// Odd-sized "same" convolution with bias; the kernel rank picks 1-D, 2-D or 3-D.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub ksize: Vec<usize>,
    pub cout: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamStore, name: &str, ksize: &[usize], cin: usize, cout: usize) -> Result<Self> {
        let mut shape = ksize.to_vec();
        shape.extend([cin, cout]);
        let fan_in = ksize.iter().product::<usize>() * cin;
        let kernel = ps.shared_uniform(&format!("{name}.kernel"), &shape, fan_in)?;
        let bias = ps.get_or_insert_with(&format!("{name}.bias"), |ps| {
            ps.zeros(&format!("{name}.bias"), &[cout])
        })?;
        Ok(Self {
            kernel,
            bias,
            ksize: ksize.to_vec(),
            cout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let y = match self.ksize.len() {
            1 => g.conv1d(x, k)?,
            2 => g.conv2d(x, k)?,
            3 => g.conv3d(x, k)?,
            n => return Err(shape_err("conv", format!("kernel rank {n}"))),
        };
        let b = g.param(self.bias);
        g.add_bias(y, b)
    }
}

/// Attention result with the softmax weights kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[L, C]`
    pub out: Var,
    /// `[heads, L, S]`
    pub weights: Var,
}

/// Scaled dot-product attention of `q: [L, C]` over `k, v: [S, C]`, split
/// into `heads` heads of width `C / heads`.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Attended> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || g.shape(v) != sk.as_slice() {
        return Err(shape_err(
            "attention",
            format!("q {sq:?}, k {sk:?}, v {:?}", g.shape(v)),
        ));
    }
    let (l, c, s) = (sq[0], sq[1], sk[0]);
    if heads == 0 || c % heads != 0 {
        return Err(shape_err("attention", format!("width {c} not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let split = |g: &mut Graph, x: Var, n: usize| -> Result<Var> {
        let r = g.reshape(x, &[n, heads, dh])?;
        g.permute(r, &[1, 0, 2])
    };
    let qh = split(g, q, l)?;
    let kh = split(g, k, s)?;
    let vh = split(g, v, s)?;
    let scores = g.bmm(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let o = g.bmm(weights, vh, false)?;
    let o = g.permute(o, &[1, 0, 2])?;
    let out = g.reshape(o, &[l, c])?;
    Ok(Attended { out, weights })
}

/// Largest head count `<= preferred` that divides `width`.
pub fn heads_for(width: usize, preferred: usize) -> usize {
    (1..=preferred.max(1)).rev().find(|h| width % h == 0).unwrap_or(1)
}

/// Average-pools a `[H, W, C]` map down to `[out_h, out_w, C]`.
pub fn avg_pool2d(g: &mut Graph, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || out_h == 0 || out_w == 0 || s[0] % out_h != 0 || s[1] % out_w != 0 {
        return Err(shape_err("avg_pool2d", format!("{s:?} -> {out_h}x{out_w}")));
    }
    if s[0] == out_h && s[1] == out_w {
        return Ok(x);
    }
    let (fh, fw, c) = (s[0] / out_h, s[1] / out_w, s[2]);
    let r = g.reshape(x, &[out_h, fh, out_w, fw, c])?;
    let p = g.permute(r, &[0, 2, 1, 3, 4])?;
    let p = g.reshape(p, &[out_h * out_w, fh * fw, c])?;
    let m = g.mean_axis(p, 1)?;
    g.reshape(m, &[out_h, out_w, c])
}

/// Elementwise mean of same-shaped tensors.
pub fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| shape_err("mean_of", "no inputs"))?;
    let mut acc = *first;
    for p in rest {
        acc = g.add(acc, *p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}
