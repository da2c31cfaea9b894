//! MARNet attention blocks: axial (column-then-row) attention and top-k
//! region-routed attention.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, Linear};
use crate::params::{ParamId, ParamStore};

/// Projections for horizontal-vertical attention on a `C`-channel map.
#[derive(Clone, Debug)]
pub struct HvAttnParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// 1x1 convolution applied to the row-attention output.
    pub post: Conv,
    /// 1x1 convolution reducing the `2C` concatenation back to `C`.
    pub reduce: Conv,
    pub channels: usize,
}

impl HvAttnParams {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let c = channels;
        Ok(Self {
            w_q: ps.shared_uniform(&format!("{name}.w_q"), &[c, c], c)?,
            w_k: ps.shared_uniform(&format!("{name}.w_k"), &[c, c], c)?,
            w_v: ps.shared_uniform(&format!("{name}.w_v"), &[c, c], c)?,
            post: Conv::new(ps, &format!("{name}.post"), &[1, 1], c, c)?,
            reduce: Conv::new(ps, &format!("{name}.reduce"), &[1, 1], 2 * c, c)?,
            channels,
        })
    }
}

/// Intermediate tensors of one horizontal-vertical attention pass.
#[derive(Clone, Copy, Debug)]
pub struct HvOutput {
    /// `F'`, `[H, W, C]`.
    pub out: Var,
    /// Column-attention output, `[H, W, C]`.
    pub f_v: Var,
    /// Row-attention output, `[H, W, C]`.
    pub f_h: Var,
    /// `[W, H, H]`: for column `w`, weights of query row `h` over rows `h'`.
    pub col_weights: Var,
    /// `[H, W, W]`: for row `h`, weights of query column `w` over columns `w'`.
    pub row_weights: Var,
}

fn project_map(g: &mut Graph, x: Var, w: ParamId) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let w = g.param(w);
    let y = g.matmul(flat, w)?;
    g.reshape(y, &s)
}

pub fn hv_attention(g: &mut Graph, f_o: Var, p: &HvAttnParams) -> Result<Var> {
    Ok(hv_attention_detailed(g, f_o, p)?.out)
}

/// Column attention (each position over its column), then row attention with
/// the column output as query against the original keys and values, then
/// `reduce(concat(post(F_h), F_o))`.
pub fn hv_attention_detailed(g: &mut Graph, f_o: Var, p: &HvAttnParams) -> Result<HvOutput> {
    let s = g.shape(f_o).to_vec();
    if s.len() != 3 || s[2] != p.channels {
        return Err(shape_err(
            "hv_attention",
            format!("input {s:?} for {} channels", p.channels),
        ));
    }
    let scale = 1.0 / (p.channels as f64).sqrt();
    let q = project_map(g, f_o, p.w_q)?;
    let k = project_map(g, f_o, p.w_k)?;
    let v = project_map(g, f_o, p.w_v)?;

    // vertical: batch over columns
    let qc = g.permute(q, &[1, 0, 2])?;
    let kc = g.permute(k, &[1, 0, 2])?;
    let vc = g.permute(v, &[1, 0, 2])?;
    let sc = g.bmm(qc, kc, true)?;
    let sc = g.scale(sc, scale);
    let col_weights = g.softmax(sc, 2)?;
    let fv = g.bmm(col_weights, vc, false)?;
    let f_v = g.permute(fv, &[1, 0, 2])?;

    // horizontal: batch over rows, queries from F_v
    let sr = g.bmm(f_v, k, true)?;
    let sr = g.scale(sr, scale);
    let row_weights = g.softmax(sr, 2)?;
    let f_h = g.bmm(row_weights, v, false)?;

    let post = p.post.forward(g, f_h)?;
    let cat = g.concat(&[post, f_o], 2)?;
    let out = p.reduce.forward(g, cat)?;
    Ok(HvOutput {
        out,
        f_v,
        f_h,
        col_weights,
        row_weights,
    })
}

/// Region attention configuration and projections.
#[derive(Clone, Debug)]
pub struct RegionAttnParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub channels: usize,
    /// Region side length.
    pub t: usize,
    /// Number of routed regions per query region.
    pub k: usize,
    /// Drop the query region from its own candidate set.
    pub exclude_self: bool,
}

impl RegionAttnParams {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, t: usize, k: usize) -> Result<Self> {
        if t == 0 || k == 0 {
            return Err(Error::InvalidConfig(format!("region side {t} and k {k} must be positive")));
        }
        let c = channels;
        Ok(Self {
            w_q: ps.shared_uniform(&format!("{name}.w_q"), &[c, c], c)?,
            w_k: ps.shared_uniform(&format!("{name}.w_k"), &[c, c], c)?,
            w_v: ps.shared_uniform(&format!("{name}.w_v"), &[c, c], c)?,
            channels,
            t,
            k,
            exclude_self: false,
        })
    }
}

/// Routing decisions of one region-attention pass. Plain integers: no
/// gradient flows through the selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Region-level similarity `Q'' K''^T`, row-major `[R, R]`.
    pub similarity: Vec<f64>,
    /// For each region, the selected region indices in rank order.
    pub indices: Vec<Vec<usize>>,
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn top_k_stable(scores: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != exclude).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order
}

/// Splits `[H, W, C]` into `[R, t*t, C]`, regions in row-major order.
pub fn partition_regions(g: &mut Graph, x: Var, t: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    if t == 0 || h % t != 0 || w % t != 0 {
        return Err(Error::IndivisibleSpatialExtent { t, height: h, width: w });
    }
    let r = g.reshape(x, &[h / t, t, w / t, t, c])?;
    let p = g.permute(r, &[0, 2, 1, 3, 4])?;
    g.reshape(p, &[(h / t) * (w / t), t * t, c])
}

/// Inverse of [`partition_regions`].
pub fn merge_regions(g: &mut Graph, x: Var, t: usize, h: usize, w: usize) -> Result<Var> {
    let c = *g.shape(x).last().unwrap();
    let r = g.reshape(x, &[h / t, w / t, t, t, c])?;
    let p = g.permute(r, &[0, 2, 1, 3, 4])?;
    g.reshape(p, &[h, w, c])
}

pub fn region_attention(g: &mut Graph, f: Var, p: &RegionAttnParams) -> Result<Var> {
    Ok(region_attention_routed(g, f, p)?.0)
}

/// Region attention returning the routing alongside the `[H, W, C]` output.
pub fn region_attention_routed(g: &mut Graph, f: Var, p: &RegionAttnParams) -> Result<(Var, Routing)> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 || s[2] != p.channels {
        return Err(shape_err(
            "region_attention",
            format!("input {s:?} for {} channels", p.channels),
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let t = p.t;
    let x = partition_regions(g, f, t)?;
    let regions = (h / t) * (w / t);
    let candidates = if p.exclude_self { regions - 1 } else { regions };
    if p.k == 0 || p.k > candidates {
        return Err(Error::InvalidK { k: p.k, regions: candidates });
    }
    let tt = t * t;

    let flat = g.reshape(x, &[regions * tt, c])?;
    let proj = |g: &mut Graph, w: ParamId| -> Result<Var> {
        let w = g.param(w);
        let y = g.matmul(flat, w)?;
        g.reshape(y, &[regions, tt, c])
    };
    let q = proj(g, p.w_q)?;
    let k = proj(g, p.w_k)?;
    let v = proj(g, p.w_v)?;
    let q_pool = g.mean_axis(q, 1)?;
    let k_pool = g.mean_axis(k, 1)?;

    let (qp, kp) = (g.value(q_pool), g.value(k_pool));
    let mut similarity = vec![0.0; regions * regions];
    for l in 0..regions {
        for m in 0..regions {
            similarity[l * regions + m] = (0..c).map(|i| qp[l * c + i] * kp[m * c + i]).sum();
        }
    }
    let indices: Vec<Vec<usize>> = (0..regions)
        .map(|l| {
            let row = &similarity[l * regions..(l + 1) * regions];
            top_k_stable(row, p.k, p.exclude_self.then_some(l))
        })
        .collect();

    let rows: Vec<usize> = indices.iter().flatten().copied().collect();
    let k_e = g.gather_rows(k, &rows)?;
    let k_e = g.reshape(k_e, &[regions, p.k * tt, c])?;
    let v_e = g.gather_rows(v, &rows)?;
    let v_e = g.reshape(v_e, &[regions, p.k * tt, c])?;

    let scores = g.bmm(q, k_e, true)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let f_x = g.bmm(weights, v_e, false)?;
    let out = merge_regions(g, f_x, t, h, w)?;
    Ok((out, Routing { similarity, indices }))
}

/// Pools `F_x` globally and projects it with a fully connected layer.
pub fn marnet_head(g: &mut Graph, f_x: Var, fc: &Linear) -> Result<Var> {
    let s = g.shape(f_x).to_vec();
    if s.len() != 3 || s[2] != fc.in_dim {
        return Err(shape_err("marnet_head", format!("map {s:?} for fc in {}", fc.in_dim)));
    }
    let pooled = g.gap(f_x)?;
    fc.forward(g, pooled)
}
