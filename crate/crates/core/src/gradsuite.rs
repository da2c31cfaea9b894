//! Finite-difference checks over every differentiable block, used by the
//! `gradcheck` command and the test suites.
//!
//! Each case reduces its output to a scalar through a fixed random weighting,
//! so no output coordinate can hide behind a symmetric sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::afd::{decouple_loss, DecoupleMode};
use crate::attention::{hv_attention, region_attention, HvAttnParams, RegionAttnParams};
use crate::dbscme::{
    channel_self_attention, shared_fuse, spatial_self_attention, ChannelAttnParams, Dbscme, DbscmeConfig,
    FuseParams, MhaParams,
};
use crate::encoders::{EncoderConfig, ImageEncoder, JointEncoder};
use crate::error::Result;
use crate::gradcheck::{grad_check_bound, grad_check_params};
use crate::graph::{Graph, Var};
use crate::nn::Conv;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probed parameter coordinates per case.
pub const PARAM_COORDS: usize = 48;

/// Uniform `[-1, 1)` tensor; `stream` separates draws under one seed.
pub fn random_tensor(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub input_error: f64,
    /// `None` for parameter-free cases.
    pub param_error: Option<f64>,
}

impl CaseResult {
    pub fn worst(&self) -> f64 {
        self.input_error.max(self.param_error.unwrap_or(0.0))
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub results: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn max_error(&self) -> f64 {
        self.results.iter().map(CaseResult::worst).fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: f64) -> Vec<&CaseResult> {
        self.results.iter().filter(|r| !(r.worst() < tol)).collect()
    }
}

type Build = dyn Fn(&mut ParamStore) -> Result<Box<dyn Fn(&mut Graph, Var) -> Result<Var>>>;

struct Case {
    name: &'static str,
    input: Vec<usize>,
    build: Box<Build>,
}

fn case<B>(name: &'static str, input: &[usize], build: B) -> Case
where
    B: Fn(&mut ParamStore) -> Result<Box<dyn Fn(&mut Graph, Var) -> Result<Var>>> + 'static,
{
    Case {
        name,
        input: input.to_vec(),
        build: Box::new(build),
    }
}

fn constant(g: &mut Graph, t: &Tensor) -> Var {
    g.input(t)
}

/// Weighted sum with weights drawn once per case.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.input(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Wraps `body` so its output is projected onto a fixed random tensor of the
/// given shape.
fn projected<F>(out_shape: &[usize], seed: u64, body: F) -> Box<dyn Fn(&mut Graph, Var) -> Result<Var>>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + 'static,
{
    let w = random_tensor(out_shape, seed, 99);
    Box::new(move |g, x| {
        let y = body(g, x)?;
        project(g, y, &w)
    })
}

fn cases(seed: u64) -> Vec<Case> {
    let c = move |shape: &[usize], stream: u64| random_tensor(shape, seed, stream);
    vec![
        case("matmul", &[3, 4], move |_| {
            let b = c(&[4, 2], 1);
            Ok(projected(&[3, 2], seed, move |g, x| {
                let b = constant(g, &b);
                g.matmul(x, b)
            }))
        }),
        case("bmm", &[2, 3, 4], move |_| {
            let b = c(&[2, 5, 4], 1);
            let b2 = c(&[2, 4, 3], 2);
            Ok(projected(&[2, 3, 5], seed, move |g, x| {
                let b = constant(g, &b);
                let y = g.bmm(x, b, true)?;
                let b2 = constant(g, &b2);
                let y2 = g.bmm(x, b2, false)?;
                let z = g.bmm(y2, x, false)?;
                let s = g.sum(z);
                let y = g.scale_by(y, s)?;
                g.bmm(y2, y, false)
            }))
        }),
        case("elementwise", &[2, 5], move |_| {
            let other = c(&[2, 5], 1);
            Ok(projected(&[2, 5], seed, move |g, x| {
                let o = constant(g, &other);
                let s = g.sigmoid(x);
                let m = g.mul(x, s)?;
                let a = g.abs(x);
                let r = g.relu(o);
                let r = g.add(r, x)?;
                let r = g.relu(r);
                let d = g.sub(m, a)?;
                let d = g.add(d, r)?;
                let d = g.one_minus(d);
                let d = g.add_scalar(d, 0.3);
                Ok(g.scale(d, -1.7))
            }))
        }),
        case("bias_and_channels", &[3, 2, 4], move |_| {
            let bias = c(&[4], 1);
            Ok(projected(&[3, 2, 4], seed, move |g, x| {
                let b = constant(g, &bias);
                let y = g.add_bias(x, b)?;
                let gate = g.mean_axis(x, 0)?;
                let gate = g.mean_axis(gate, 0)?;
                g.mul_channels(y, gate)
            }))
        }),
        case("softmax", &[3, 4, 2], move |_| {
            Ok(projected(&[3, 4, 2], seed, move |g, x| {
                let a = g.softmax(x, 1)?;
                let b = g.softmax(x, 2)?;
                let b = g.softmax(b, 0)?;
                g.add(a, b)
            }))
        }),
        case("reshape_permute_concat", &[2, 3, 4], move |_| {
            let other = c(&[4, 3, 1], 1);
            Ok(projected(&[4, 3, 3], seed, move |g, x| {
                let p = g.permute(x, &[2, 1, 0])?;
                let o = constant(g, &other);
                let cat = g.concat(&[p, o], 2)?;
                let r = g.reshape(cat, &[12, 3])?;
                let r = g.gather_rows(r, &[0, 5, 5, 11, 2, 7, 1, 3, 4, 6, 8, 9])?;
                g.reshape(r, &[4, 3, 3])
            }))
        }),
        case("pooling", &[4, 4, 3], move |_| {
            Ok(projected(&[2, 2, 3], seed, move |g, x| {
                let pooled = crate::nn::avg_pool2d(g, x, 2, 2)?;
                let gap = g.gap(x)?;
                g.mul_channels(pooled, gap)
            }))
        }),
        case("conv1d", &[7, 2], move |ps| {
            let conv = Conv::new(ps, "conv1d", &[3], 2, 3)?;
            Ok(projected(&[7, 3], seed, move |g, x| conv.forward(g, x)))
        }),
        case("conv2d", &[4, 5, 2], move |ps| {
            let conv = Conv::new(ps, "conv2d", &[3, 3], 2, 3)?;
            Ok(projected(&[4, 5, 3], seed, move |g, x| conv.forward(g, x)))
        }),
        case("conv3d", &[3, 4, 3, 2], move |ps| {
            let conv = Conv::new(ps, "conv3d", &[3, 3, 3], 2, 2)?;
            Ok(projected(&[3, 4, 3, 2], seed, move |g, x| conv.forward(g, x)))
        }),
        case("cross_entropy", &[5], move |_| {
            let label = (seed % 5) as usize;
            Ok(Box::new(move |g: &mut Graph, x| {
                let y = g.scale(x, 3.0);
                g.cross_entropy(y, label)
            }))
        }),
        case("cosine", &[6], move |_| {
            let other = c(&[6], 1);
            Ok(Box::new(move |g: &mut Graph, x| {
                let o = constant(g, &other);
                let cos = g.cosine(x, o, 1e-8)?;
                let self_cos = g.cosine(x, x, 1e-8)?;
                let c2 = g.mul(cos, cos)?;
                g.add(c2, self_cos)
            }))
        }),
        case("hv_attention", &[4, 4, 2], move |ps| {
            let p = HvAttnParams::new(ps, "hv", 2)?;
            Ok(projected(&[4, 4, 2], seed, move |g, x| hv_attention(g, x, &p)))
        }),
        case("region_attention", &[14, 14, 2], move |ps| {
            let p = RegionAttnParams::new(ps, "region", 2, 7, 2)?;
            Ok(projected(&[14, 14, 2], seed, move |g, x| region_attention(g, x, &p)))
        }),
        case("spatial_self_attention", &[2, 2, 8], move |ps| {
            let p = MhaParams::new(ps, "spatial", 8, 2)?;
            Ok(projected(&[2, 2, 8], seed, move |g, x| spatial_self_attention(g, x, &p)))
        }),
        case("channel_self_attention", &[2, 2, 6], move |ps| {
            let p = ChannelAttnParams::new(ps, "channel", 8, 8)?;
            Ok(projected(&[2, 2, 6], seed, move |g, x| channel_self_attention(g, x, &p)))
        }),
        case("shared_fuse", &[2, 2, 4], move |ps| {
            let p = FuseParams::new(ps, "fuse", 4, 2, 4)?;
            let other = c(&[2, 2, 4], 1);
            Ok(projected(&[2, 2, 4], seed, move |g, x| {
                let b = constant(g, &other);
                shared_fuse(g, x, b, &p)
            }))
        }),
        case("dbscme", &[8, 2, 2, 4], move |ps| {
            let cfg = DbscmeConfig {
                d: 4,
                heads: 2,
                d_c: 4,
                hidden: 6,
                num_classes: vec![3, 2],
                ..Default::default()
            };
            let model = Dbscme::new(ps, &cfg)?;
            // Give the zero-initialised task gates a nonzero value.
            for (j, t) in model.tasks.iter().enumerate() {
                ps.get_mut(t.w).data_mut()[0] = 0.4 - 0.9 * j as f64;
            }
            let w0 = c(&[3], 1);
            let w1 = c(&[2], 2);
            Ok(Box::new(move |g: &mut Graph, x| {
                let mut maps = Vec::with_capacity(8);
                for m in 0..8 {
                    let r = g.gather_rows(x, &[m])?;
                    maps.push(g.reshape(r, &[2, 2, 4])?);
                }
                let out = model.forward(g, &maps)?;
                let a = project(g, out.logits[0], &w0)?;
                let b = project(g, out.logits[1], &w1)?;
                let dec = decouple_loss(g, out.f_sh, &out.f_sp, DecoupleMode::AbsCos)?;
                let s = g.add(a, b)?;
                g.add(s, dec)
            }))
        }),
        case("decouple_loss", &[5], move |_| {
            let sp: Vec<Tensor> = (0..3).map(|j| c(&[5], 1 + j)).collect();
            Ok(Box::new(move |g: &mut Graph, x| {
                let sp: Vec<Var> = sp.iter().map(|t| constant(g, t)).collect();
                let a = decouple_loss(g, x, &sp, DecoupleMode::AbsCos)?;
                let b = decouple_loss(g, x, &sp, DecoupleMode::Cos)?;
                let c2 = decouple_loss(g, x, &sp, DecoupleMode::CosSquared)?;
                let b = g.scale(b, 0.5);
                let s = g.add(a, b)?;
                g.add(s, c2)
            }))
        }),
        case("encode_image", &[14, 14, 2], move |ps| {
            let cfg = EncoderConfig {
                c_in: 2,
                channels: 2,
                d: 3,
                region: 7,
                top_k: 2,
                map_h: 7,
                map_w: 7,
                ..Default::default()
            };
            let enc = ImageEncoder::new(ps, "img", &cfg)?;
            let wv = c(&[3], 1);
            let wm = c(&[7, 7, 3], 2);
            Ok(Box::new(move |g: &mut Graph, x| {
                let e = enc.encode(g, x)?;
                let a = project(g, e.vector, &wv)?;
                let b = project(g, e.map, &wm)?;
                g.add(a, b)
            }))
        }),
        case("encode_joints", &[4, 5, 3], move |ps| {
            let cfg = EncoderConfig {
                d: 3,
                map_h: 2,
                map_w: 2,
                joint_hidden: 4,
                ..Default::default()
            };
            let enc = JointEncoder::new(ps, "joints", &cfg)?;
            let wv = c(&[3], 1);
            let wm = c(&[2, 2, 3], 2);
            Ok(Box::new(move |g: &mut Graph, x| {
                let e = enc.encode(g, x)?;
                let a = project(g, e.vector, &wv)?;
                let b = project(g, e.map, &wm)?;
                g.add(a, b)
            }))
        }),
    ]
}

/// Names of all cases, in run order.
pub fn case_names() -> Vec<&'static str> {
    cases(0).into_iter().map(|c| c.name).collect()
}

/// Runs one case under one seed.
pub fn run_case(name: &str, seed: u64, h: f64) -> Result<Option<CaseResult>> {
    let Some(c) = cases(seed).into_iter().find(|c| c.name == name) else {
        return Ok(None);
    };
    run(&c, seed, h).map(Some)
}

fn run(c: &Case, seed: u64, h: f64) -> Result<CaseResult> {
    let mut ps = ParamStore::new(seed);
    let f = (c.build)(&mut ps)?;
    let x = random_tensor(&c.input, seed, 0);
    let input_error = grad_check_bound(&ps, &f, &x, h)?;
    let param_error = if ps.is_empty() {
        None
    } else {
        Some(grad_check_params(
            &ps,
            |g| {
                let x = g.input(&x);
                f(g, x)
            },
            h,
            PARAM_COORDS,
        )?)
    };
    Ok(CaseResult {
        name: c.name,
        seed,
        input_error,
        param_error,
    })
}

/// Every case on every seed.
pub fn run_suite(seeds: &[u64], h: f64) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for &seed in seeds {
        for c in cases(seed) {
            results.push(run(&c, seed, h)?);
        }
    }
    Ok(SuiteReport { results })
}
