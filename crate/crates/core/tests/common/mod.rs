//! Straight-line reference implementations over flat row-major buffers.
//! Nothing here touches the tape; masks and full matrices replace the
//! batching tricks of the real kernels.
#![allow(dead_code)]

use uvmtl::attention::{HvAttnParams, RegionAttnParams};
use uvmtl::dbscme::{ChannelAttnParams, Dbscme, FuseParams, JointFusion, MhaParams, SqueezeExcite};
use uvmtl::encoders::{ImageEncoder, JointEncoder};
use uvmtl::nn::{Conv, Linear};
use uvmtl::params::{ParamId, ParamStore};

pub fn param(ps: &ParamStore, id: ParamId) -> &[f64] {
    ps.get(id).data()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `[m, k] x [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn linear(ps: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let rows = x.len() / l.in_dim;
    let mut y = matmul(x, param(ps, l.weight), rows, l.in_dim, l.out_dim);
    if let Some(b) = l.bias {
        let b = param(ps, b);
        for r in 0..rows {
            for j in 0..l.out_dim {
                y[r * l.out_dim + j] += b[j];
            }
        }
    }
    y
}

/// Zero-padded "same" correlation of a channels-last tensor with spatial
/// extents `extent` against a `[ksize..., cin, cout]` kernel.
pub fn conv_same(x: &[f64], extent: &[usize], cin: usize, k: &[f64], ksize: &[usize], cout: usize) -> Vec<f64> {
    let rank = extent.len();
    assert_eq!(ksize.len(), rank);
    let positions: usize = extent.iter().product();
    let taps: usize = ksize.iter().product();
    let unravel = |mut i: usize, dims: &[usize]| -> Vec<usize> {
        let mut out = vec![0; dims.len()];
        for d in (0..dims.len()).rev() {
            out[d] = i % dims[d];
            i /= dims[d];
        }
        out
    };
    let mut out = vec![0.0; positions * cout];
    for p in 0..positions {
        let at = unravel(p, extent);
        for tap in 0..taps {
            let off = unravel(tap, ksize);
            let mut src = 0usize;
            let mut inside = true;
            for d in 0..rank {
                let c = at[d] as isize + off[d] as isize - (ksize[d] / 2) as isize;
                if c < 0 || c >= extent[d] as isize {
                    inside = false;
                    break;
                }
                src = src * extent[d] + c as usize;
            }
            if !inside {
                continue;
            }
            for ci in 0..cin {
                for co in 0..cout {
                    out[p * cout + co] += x[src * cin + ci] * k[(tap * cin + ci) * cout + co];
                }
            }
        }
    }
    out
}

pub fn conv_layer(ps: &ParamStore, c: &Conv, x: &[f64], extent: &[usize], cin: usize) -> Vec<f64> {
    let mut y = conv_same(x, extent, cin, param(ps, c.kernel), &c.ksize, c.cout);
    let b = param(ps, c.bias);
    for (i, v) in y.iter_mut().enumerate() {
        *v += b[i % c.cout];
    }
    y
}

/// Mean over positions of a channels-last buffer.
pub fn gap(x: &[f64], c: usize) -> Vec<f64> {
    let n = x.len() / c;
    (0..c).map(|j| (0..n).map(|i| x[i * c + j]).sum::<f64>() / n as f64).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Dense attention of `nq` queries over `nk` keys, restricted to pairs where
/// `allowed(i, j)` holds.
pub fn masked_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    scale: f64,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let mut out = vec![0.0; nq * c];
    for i in 0..nq {
        let keys: Vec<usize> = (0..nk).filter(|&j| allowed(i, j)).collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|&j| (0..c).map(|t| q[i * c + t] * k[j * c + t]).sum::<f64>() * scale)
            .collect();
        let w = softmax(&scores);
        for (wj, &j) in w.iter().zip(&keys) {
            for t in 0..c {
                out[i * c + t] += wj * v[j * c + t];
            }
        }
    }
    out
}

pub fn hv_attention(ps: &ParamStore, p: &HvAttnParams, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = p.channels;
    let n = h * w;
    let q = matmul(x, param(ps, p.w_q), n, c, c);
    let k = matmul(x, param(ps, p.w_k), n, c, c);
    let v = matmul(x, param(ps, p.w_v), n, c, c);
    let scale = 1.0 / (c as f64).sqrt();
    let f_v = masked_attention(&q, &k, &v, n, n, c, scale, |i, j| i % w == j % w);
    let f_h = masked_attention(&f_v, &k, &v, n, n, c, scale, |i, j| i / w == j / w);
    let post = conv_layer(ps, &p.post, &f_h, &[h, w], c);
    let mut cat = Vec::with_capacity(n * 2 * c);
    for i in 0..n {
        cat.extend_from_slice(&post[i * c..(i + 1) * c]);
        cat.extend_from_slice(&x[i * c..(i + 1) * c]);
    }
    conv_layer(ps, &p.reduce, &cat, &[h, w], 2 * c)
}

/// Indices of the `k` best scores by repeated selection; the first maximum
/// found (lowest index) wins a tie.
pub fn select_top_k(scores: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    if let Some(s) = skip {
        taken[s] = true;
    }
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("enough candidates");
        taken[b] = true;
        out.push(b);
    }
    out
}

pub struct RegionOracle {
    pub out: Vec<f64>,
    pub similarity: Vec<f64>,
    pub indices: Vec<Vec<usize>>,
}

/// Full-resolution region attention: every pixel of region `l` attends every
/// pixel of the regions routed to `l`.
pub fn region_attention(ps: &ParamStore, p: &RegionAttnParams, x: &[f64], h: usize, w: usize) -> RegionOracle {
    let c = p.channels;
    let t = p.t;
    let n = h * w;
    let per_row = w / t;
    let regions = (h / t) * per_row;
    let region_of = |i: usize| (i / w / t) * per_row + (i % w) / t;
    let q = matmul(x, param(ps, p.w_q), n, c, c);
    let k = matmul(x, param(ps, p.w_k), n, c, c);
    let v = matmul(x, param(ps, p.w_v), n, c, c);
    let pool = |m: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; regions * c];
        for i in 0..n {
            for j in 0..c {
                out[region_of(i) * c + j] += m[i * c + j] / (t * t) as f64;
            }
        }
        out
    };
    let (qp, kp) = (pool(&q), pool(&k));
    let mut similarity = vec![0.0; regions * regions];
    for l in 0..regions {
        for m in 0..regions {
            similarity[l * regions + m] = (0..c).map(|j| qp[l * c + j] * kp[m * c + j]).sum();
        }
    }
    let indices: Vec<Vec<usize>> = (0..regions)
        .map(|l| {
            select_top_k(
                &similarity[l * regions..(l + 1) * regions],
                p.k,
                p.exclude_self.then_some(l),
            )
        })
        .collect();
    let scale = 1.0 / (c as f64).sqrt();
    let out = masked_attention(&q, &k, &v, n, n, c, scale, |i, j| {
        indices[region_of(i)].contains(&region_of(j))
    });
    RegionOracle {
        out,
        similarity,
        indices,
    }
}

/// Multi-head attention with explicit per-head loops.
pub fn mha(q: &[f64], k: &[f64], v: &[f64], l: usize, s: usize, c: usize, heads: usize) -> Vec<f64> {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; l * c];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..l {
            let scores: Vec<f64> = (0..s)
                .map(|j| cols.clone().map(|t| q[i * c + t] * k[j * c + t]).sum::<f64>() * scale)
                .collect();
            let wts = softmax(&scores);
            for j in 0..s {
                for t in cols.clone() {
                    out[i * c + t] += wts[j] * v[j * c + t];
                }
            }
        }
    }
    out
}

pub fn spatial_self_attention(ps: &ParamStore, p: &MhaParams, x: &[f64]) -> Vec<f64> {
    let c = p.q.in_dim;
    let n = x.len() / c;
    let q = linear(ps, &p.q, x);
    let k = linear(ps, &p.k, x);
    let v = linear(ps, &p.v, x);
    let a = mha(&q, &k, &v, n, n, c, p.heads);
    let o = linear(ps, &p.o, &a);
    x.iter().zip(&o).map(|(a, b)| a + b).collect()
}

pub fn channel_gate(ps: &ParamStore, p: &ChannelAttnParams, x: &[f64], c: usize) -> Vec<f64> {
    let pooled = gap(x, c);
    let lift = |conv: &Conv| -> Vec<f64> {
        let k = param(ps, conv.kernel);
        let b = param(ps, conv.bias);
        let mut out = vec![0.0; c * p.d_c];
        for i in 0..c {
            for j in 0..p.d_c {
                let mut s = b[j];
                for tap in 0..3 {
                    let src = i as isize + tap as isize - 1;
                    if (0..c as isize).contains(&src) {
                        s += pooled[src as usize] * k[tap * p.d_c + j];
                    }
                }
                out[i * p.d_c + j] = s;
            }
        }
        out
    };
    let (q, k, v) = (lift(&p.conv_q), lift(&p.conv_k), lift(&p.conv_v));
    let a = mha(&q, &k, &v, c, c, p.d_c, p.heads);
    linear(ps, &p.gate, &a).into_iter().map(sigmoid).collect()
}

pub fn channel_self_attention(ps: &ParamStore, p: &ChannelAttnParams, x: &[f64], c: usize) -> Vec<f64> {
    let gate = channel_gate(ps, p, x, c);
    x.iter().enumerate().map(|(i, v)| v * gate[i % c]).collect()
}

pub fn shared_fuse(ps: &ParamStore, p: &FuseParams, a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = p.conv1.cout;
    let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let m1 = conv_layer(ps, &p.conv1, &sum, &[h, w], c);
    let m3 = conv_layer(ps, &p.conv3, &sum, &[h, w], c);
    let m: Vec<f64> = m1.iter().zip(&m3).map(|(x, y)| x + y).collect();
    let s = spatial_self_attention(ps, &p.spatial, &m);
    let g = channel_self_attention(ps, &p.channel, &s, c);
    (0..a.len())
        .map(|i| {
            let gate = sigmoid(g[i]);
            b[i] * gate + a[i] * (1.0 - gate)
        })
        .collect()
}

pub fn squeeze_excite(ps: &ParamStore, se: &SqueezeExcite, x: &[f64]) -> Vec<f64> {
    let hdn = relu(&linear(ps, &se.down, x));
    let s = linear(ps, &se.up, &hdn);
    x.iter().zip(&s).map(|(v, g)| v * sigmoid(*g)).collect()
}

fn mean_maps(maps: &[Vec<f64>]) -> Vec<f64> {
    let n = maps.len() as f64;
    (0..maps[0].len()).map(|i| maps.iter().map(|m| m[i]).sum::<f64>() / n).collect()
}

pub struct DbscmeOracle {
    pub logits: Vec<Vec<f64>>,
    pub f_sh: Vec<f64>,
    pub f_sp: Vec<Vec<f64>>,
}

/// The embedding on eight `[h, w, d]` maps, written out step by step.
pub fn dbscme(ps: &ParamStore, m: &Dbscme, maps: &[Vec<f64>], h: usize, w: usize) -> DbscmeOracle {
    let d = m.cfg.d;
    let n = h * w;
    let mut f_c = Vec::with_capacity(n * 8 * d);
    for i in 0..n {
        for map in maps {
            f_c.extend_from_slice(&map[i * d..(i + 1) * d]);
        }
    }
    let f_sc = mean_maps(&maps[0..3]);
    let f_dr = mean_maps(&maps[3..6]);
    let f_jo = match m.cfg.joint_fusion {
        JointFusion::Mean => mean_maps(&maps[6..8]),
        JointFusion::Concat => {
            let mut cat = Vec::with_capacity(n * 2 * d);
            for i in 0..n {
                cat.extend_from_slice(&maps[6][i * d..(i + 1) * d]);
                cat.extend_from_slice(&maps[7][i * d..(i + 1) * d]);
            }
            conv_layer(ps, m.joint_reduce.as_ref().unwrap(), &cat, &[h, w], 2 * d)
        }
    };
    let f_ps = shared_fuse(ps, &m.fuse_ps, &f_dr, &f_sc, h, w);
    let shared = shared_fuse(ps, &m.fuse_sh, &f_jo, &f_ps, h, w);
    let f_sh = linear(ps, &m.lift, &gap(&shared, d));
    let width = 8 * d;
    let mut logits = Vec::new();
    let mut f_sp = Vec::new();
    for t in &m.tasks {
        let mut s = f_c.clone();
        if !m.cfg.disable_spatial {
            s = spatial_self_attention(ps, &t.spatial, &s);
        }
        if !m.cfg.disable_channel {
            s = channel_self_attention(ps, &t.channel, &s, width);
        }
        let v = gap(&s, width);
        let blend = sigmoid(param(ps, t.w)[0]);
        let a = linear(ps, &t.l1, &f_sh);
        let b = linear(ps, &t.l2, &squeeze_excite(ps, &t.se, &v));
        let hid: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (blend * x + (1.0 - blend) * y).max(0.0))
            .collect();
        logits.push(linear(ps, &t.head, &hid));
        f_sp.push(v);
    }
    DbscmeOracle { logits, f_sh, f_sp }
}

/// Mean-pools `[h, w, c]` down to `[oh, ow, c]`.
pub fn avg_pool(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (fh, fw) = (h / oh, w / ow);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let o = (y / fh) * ow + xx / fw;
            for j in 0..c {
                out[o * c + j] += x[(y * w + xx) * c + j] / (fh * fw) as f64;
            }
        }
    }
    out
}

/// `(vector, map)` of an image encoder on a `[h, w, c_in]` input.
pub fn encode_image(ps: &ParamStore, e: &ImageEncoder, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let cin = x.len() / (h * w);
    let c = e.hv.channels;
    let s = relu(&conv_layer(ps, &e.stem, x, &[h, w], cin));
    let f = hv_attention(ps, &e.hv, &s, h, w);
    let f_x = region_attention(ps, &e.region, &f, h, w).out;
    let vector = linear(ps, &e.fc, &gap(&f_x, c));
    let small = avg_pool(&f_x, h, w, c, e.map_h, e.map_w);
    (vector, linear(ps, &e.fc, &small))
}

/// `(vector, map)` of a joint encoder on a `[t, j, 3]` input.
pub fn encode_joints(ps: &ParamStore, e: &JointEncoder, x: &[f64], t: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
    let hidden = e.conv1.cout;
    let h1 = relu(&conv_layer(ps, &e.conv1, x, &[t, j, 3], 1));
    let h2 = relu(&conv_layer(ps, &e.conv2, &h1, &[t, j, 3], hidden));
    let vector = gap(&h2, e.d);
    let map = linear(ps, &e.to_map, &vector);
    (vector, map)
}

/// Overwrites every parameter, biases and gates included, with uniform
/// values in `[-scale, scale)`.
pub fn randomize(ps: &mut ParamStore, seed: u64, scale: f64) {
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        let shape = ps.get(id).shape().to_vec();
        let r = uvmtl::gradsuite::random_tensor(&shape, seed, 1000 + id.index() as u64);
        for (p, v) in ps.get_mut(id).data_mut().iter_mut().zip(r.data()) {
            *p = v * scale;
        }
    }
}
