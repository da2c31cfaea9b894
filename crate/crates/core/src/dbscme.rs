//! Dual-branch spatial-channel embedding: per-task specific features from
//! spatial and channel self-attention over the concatenated modality maps,
//! a recursively gated shared feature, and the adaptive per-task blend.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{heads_for, multi_head_attention, Conv, Linear};
use crate::params::{ParamId, ParamStore};

/// Query, key, value and output projections for multi-head attention.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MhaParams {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, false)?,
            k: Linear::new(ps, &format!("{name}.k"), width, width, false)?,
            v: Linear::new(ps, &format!("{name}.v"), width, width, false)?,
            o: Linear::new(ps, &format!("{name}.o"), width, width, false)?,
            heads,
        })
    }
}

/// `F_s = F_c + unflatten(MHA(flatten(F_c)))` over the `H'W'` tokens.
pub fn spatial_self_attention(g: &mut Graph, f_c: Var, p: &MhaParams) -> Result<Var> {
    let s = g.shape(f_c).to_vec();
    if s.len() != 3 || s[2] != p.q.in_dim {
        return Err(shape_err(
            "spatial_self_attention",
            format!("input {s:?} for width {}", p.q.in_dim),
        ));
    }
    let tokens = g.reshape(f_c, &[s[0] * s[1], s[2]])?;
    let q = p.q.forward(g, tokens)?;
    let k = p.k.forward(g, tokens)?;
    let v = p.v.forward(g, tokens)?;
    let a = multi_head_attention(g, q, k, v, p.heads)?;
    let o = p.o.forward(g, a.out)?;
    let o = g.reshape(o, &s)?;
    g.add(f_c, o)
}

/// Channel tokens lifted by three kernel-3 convolutions, attended, and read
/// out to one sigmoid gate per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttnParams {
    pub conv_q: Conv,
    pub conv_k: Conv,
    pub conv_v: Conv,
    pub gate: Linear,
    pub heads: usize,
    pub d_c: usize,
}

impl ChannelAttnParams {
    pub fn new(ps: &mut ParamStore, name: &str, d_c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_c % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "channel token width {d_c} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            conv_q: Conv::new(ps, &format!("{name}.conv_q"), &[3], 1, d_c)?,
            conv_k: Conv::new(ps, &format!("{name}.conv_k"), &[3], 1, d_c)?,
            conv_v: Conv::new(ps, &format!("{name}.conv_v"), &[3], 1, d_c)?,
            gate: Linear::new(ps, &format!("{name}.gate"), d_c, 1, true)?,
            heads,
            d_c,
        })
    }
}

/// Per-channel gate in `(0, 1)` computed from `F_s`, as a `[C']` vector.
pub fn channel_gate(g: &mut Graph, f_s: Var, p: &ChannelAttnParams) -> Result<Var> {
    let pooled = g.gap(f_s)?;
    let c = g.shape(pooled)[0];
    let seq = g.reshape(pooled, &[c, 1])?;
    let q = p.conv_q.forward(g, seq)?;
    let k = p.conv_k.forward(g, seq)?;
    let v = p.conv_v.forward(g, seq)?;
    let a = multi_head_attention(g, q, k, v, p.heads)?;
    let s = p.gate.forward(g, a.out)?;
    let s = g.reshape(s, &[c])?;
    Ok(g.sigmoid(s))
}

pub fn channel_self_attention(g: &mut Graph, f_s: Var, p: &ChannelAttnParams) -> Result<Var> {
    let gate = channel_gate(g, f_s, p)?;
    g.mul_channels(f_s, gate)
}

/// `F_b * g + F_a * (1 - g)`.
pub fn blend(g: &mut Graph, f_a: Var, f_b: Var, gate: Var) -> Result<Var> {
    let b = g.mul(f_b, gate)?;
    let inv = g.one_minus(gate);
    let a = g.mul(f_a, inv)?;
    g.add(a, b)
}

/// Two-scale merge followed by a spatial-then-channel attention gate.
#[derive(Clone, Debug)]
pub struct FuseParams {
    pub conv1: Conv,
    pub conv3: Conv,
    pub spatial: MhaParams,
    pub channel: ChannelAttnParams,
}

impl FuseParams {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize, d_c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(ps, &format!("{name}.conv1"), &[1, 1], width, width)?,
            conv3: Conv::new(ps, &format!("{name}.conv3"), &[3, 3], width, width)?,
            spatial: MhaParams::new(ps, &format!("{name}.spatial"), width, heads_for(width, heads))?,
            channel: ChannelAttnParams::new(ps, &format!("{name}.channel"), d_c, heads_for(d_c, heads))?,
        })
    }
}

pub fn shared_fuse(g: &mut Graph, f_a: Var, f_b: Var, p: &FuseParams) -> Result<Var> {
    if g.shape(f_a) != g.shape(f_b) {
        return Err(shape_err(
            "shared_fuse",
            format!("{:?} vs {:?}", g.shape(f_a), g.shape(f_b)),
        ));
    }
    let sum = g.add(f_a, f_b)?;
    let m1 = p.conv1.forward(g, sum)?;
    let m3 = p.conv3.forward(g, sum)?;
    let m = g.add(m1, m3)?;
    let s = spatial_self_attention(g, m, &p.spatial)?;
    let c = channel_self_attention(g, s, &p.channel)?;
    let gate = g.sigmoid(c);
    blend(g, f_a, f_b, gate)
}

/// Squeeze-excite gate on a `[C']` vector.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub down: Linear,
    pub up: Linear,
}

impl SqueezeExcite {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, reduction: usize) -> Result<Self> {
        let mid = (width / reduction.max(1)).max(1);
        Ok(Self {
            down: Linear::new(ps, &format!("{name}.down"), width, mid, true)?,
            up: Linear::new(ps, &format!("{name}.up"), mid, width, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.down.forward(g, x)?;
        let h = g.relu(h);
        let s = self.up.forward(g, h)?;
        let s = g.sigmoid(s);
        g.mul(x, s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum JointFusion {
    #[default]
    Mean,
    /// Channel concat of the two joint maps, then a 1x1 reduction.
    Concat,
}

impl std::str::FromStr for JointFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(JointFusion::Mean),
            "concat" => Ok(JointFusion::Concat),
            _ => Err(Error::InvalidConfig(format!("unknown joint fusion `{s}`"))),
        }
    }
}

impl std::fmt::Display for JointFusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JointFusion::Mean => "mean",
            JointFusion::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbscmeConfig {
    /// Per-modality map width `D`; `C' = 8 D`.
    pub d: usize,
    pub heads: usize,
    pub d_c: usize,
    /// Width of the blend layers feeding each head.
    pub hidden: usize,
    pub num_classes: Vec<usize>,
    pub se_reduction: usize,
    pub share_mha: bool,
    pub joint_fusion: JointFusion,
    pub disable_spatial: bool,
    pub disable_channel: bool,
}

impl Default for DbscmeConfig {
    fn default() -> Self {
        Self {
            d: 4,
            heads: 8,
            d_c: 8,
            hidden: 16,
            num_classes: vec![4; 4],
            se_reduction: 4,
            share_mha: false,
            joint_fusion: JointFusion::Mean,
            disable_spatial: false,
            disable_channel: false,
        }
    }
}

impl DbscmeConfig {
    pub fn concat_width(&self) -> usize {
        8 * self.d
    }
}

/// Task-specific parameters.
#[derive(Clone, Debug)]
pub struct TaskBranch {
    pub spatial: MhaParams,
    pub channel: ChannelAttnParams,
    /// Shared/specific balance `w_j`, zero-initialised.
    pub w: ParamId,
    pub l1: Linear,
    pub l2: Linear,
    pub se: SqueezeExcite,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct Dbscme {
    pub cfg: DbscmeConfig,
    pub tasks: Vec<TaskBranch>,
    pub fuse_ps: FuseParams,
    pub fuse_sh: FuseParams,
    pub joint_reduce: Option<Conv>,
    pub lift: Linear,
}

/// Per-sample outputs of the embedding and heads.
#[derive(Clone, Debug)]
pub struct TaskOutputs {
    pub logits: Vec<Var>,
    /// Pooled shared feature, `[C']`.
    pub f_sh: Var,
    /// Pooled specific features, one `[C']` per task.
    pub f_sp: Vec<Var>,
}

impl Dbscme {
    pub fn new(ps: &mut ParamStore, cfg: &DbscmeConfig) -> Result<Self> {
        if cfg.num_classes.is_empty() || cfg.num_classes.iter().any(|&k| k < 2) {
            return Err(Error::InvalidConfig(format!(
                "tasks need at least two classes each: {:?}",
                cfg.num_classes
            )));
        }
        let (d, cp) = (cfg.d, cfg.concat_width());
        let mut tasks = Vec::with_capacity(cfg.num_classes.len());
        for (j, &classes) in cfg.num_classes.iter().enumerate() {
            let attn = if cfg.share_mha {
                "dbscme.shared".to_string()
            } else {
                format!("dbscme.task{j}")
            };
            let name = format!("dbscme.task{j}");
            tasks.push(TaskBranch {
                spatial: MhaParams::new(ps, &format!("{attn}.spatial"), cp, cfg.heads)?,
                channel: ChannelAttnParams::new(ps, &format!("{attn}.channel"), cfg.d_c, cfg.heads)?,
                w: ps.zeros(&format!("{name}.w"), &[1])?,
                l1: Linear::new(ps, &format!("{name}.l1"), cp, cfg.hidden, true)?,
                l2: Linear::new(ps, &format!("{name}.l2"), cp, cfg.hidden, true)?,
                se: SqueezeExcite::new(ps, &format!("{name}.se"), cp, cfg.se_reduction)?,
                head: Linear::new(ps, &format!("{name}.head"), cfg.hidden, classes, true)?,
            });
        }
        let joint_reduce = match cfg.joint_fusion {
            JointFusion::Mean => None,
            JointFusion::Concat => Some(Conv::new(ps, "dbscme.joint_reduce", &[1, 1], 2 * d, d)?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            tasks,
            fuse_ps: FuseParams::new(ps, "dbscme.fuse_ps", d, cfg.heads, cfg.d_c)?,
            fuse_sh: FuseParams::new(ps, "dbscme.fuse_sh", d, cfg.heads, cfg.d_c)?,
            joint_reduce,
            lift: Linear::new(ps, "dbscme.lift", d, cp, true)?,
        })
    }

    fn check_maps(&self, g: &Graph, maps: &[Var]) -> Result<()> {
        if maps.len() != 8 {
            return Err(shape_err("dbscme", format!("{} maps, expected 8", maps.len())));
        }
        let s = g.shape(maps[0]);
        if s.len() != 3 || s[2] != self.cfg.d || maps.iter().any(|&m| g.shape(m) != s) {
            return Err(shape_err("dbscme", format!("maps must share [H', W', {}]", self.cfg.d)));
        }
        Ok(())
    }

    /// `F_sh` from the scene, driver and joint group maps (width `D`).
    pub fn shared_map(&self, g: &mut Graph, maps: &[Var]) -> Result<Var> {
        let f_sc = crate::nn::mean_of(g, &maps[0..3])?;
        let f_dr = crate::nn::mean_of(g, &maps[3..6])?;
        let f_jo = match &self.joint_reduce {
            None => crate::nn::mean_of(g, &maps[6..8])?,
            Some(conv) => {
                let cat = g.concat(&maps[6..8], 2)?;
                conv.forward(g, cat)?
            }
        };
        let f_ps = shared_fuse(g, f_dr, f_sc, &self.fuse_ps)?;
        shared_fuse(g, f_jo, f_ps, &self.fuse_sh)
    }

    /// `F_sp_j` from the channel-concatenated map.
    pub fn specific_map(&self, g: &mut Graph, f_c: Var, j: usize) -> Result<Var> {
        let t = &self.tasks[j];
        let f_s = if self.cfg.disable_spatial {
            f_c
        } else {
            spatial_self_attention(g, f_c, &t.spatial)?
        };
        if self.cfg.disable_channel {
            Ok(f_s)
        } else {
            channel_self_attention(g, f_s, &t.channel)
        }
    }

    /// `Head_j(relu(s L1(f_sh) + (1 - s) L2(se(f_sp))))` with `s = sigmoid(w_j)`.
    pub fn task_logits(&self, g: &mut Graph, f_sh: Var, f_sp: Var, j: usize) -> Result<Var> {
        let t = &self.tasks[j];
        let s = g.param(t.w);
        let s = g.sigmoid(s);
        let a = t.l1.forward(g, f_sh)?;
        let a = g.scale_by(a, s)?;
        let gated = t.se.forward(g, f_sp)?;
        let b = t.l2.forward(g, gated)?;
        let inv = g.one_minus(s);
        let b = g.scale_by(b, inv)?;
        let h = g.add(a, b)?;
        let h = g.relu(h);
        t.head.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph, maps: &[Var]) -> Result<TaskOutputs> {
        self.check_maps(g, maps)?;
        let f_c = g.concat(maps, 2)?;
        let shared = self.shared_map(g, maps)?;
        let pooled = g.gap(shared)?;
        let f_sh = self.lift.forward(g, pooled)?;
        let mut logits = Vec::with_capacity(self.tasks.len());
        let mut f_sp = Vec::with_capacity(self.tasks.len());
        for j in 0..self.tasks.len() {
            let sp = self.specific_map(g, f_c, j)?;
            let v = g.gap(sp)?;
            logits.push(self.task_logits(g, f_sh, v, j)?);
            f_sp.push(v);
        }
        Ok(TaskOutputs { logits, f_sh, f_sp })
    }

    /// Ablation without the embedding: pooled channel concat straight into
    /// `Head_j(relu(L2_j(.)))`. Shared and specific features coincide.
    pub fn plain_forward(&self, g: &mut Graph, maps: &[Var]) -> Result<TaskOutputs> {
        self.check_maps(g, maps)?;
        let f_c = g.concat(maps, 2)?;
        let f = g.gap(f_c)?;
        let mut logits = Vec::with_capacity(self.tasks.len());
        for t in &self.tasks {
            let h = t.l2.forward(g, f)?;
            let h = g.relu(h);
            logits.push(t.head.forward(g, h)?);
        }
        Ok(TaskOutputs {
            logits,
            f_sh: f,
            f_sp: vec![f; self.tasks.len()],
        })
    }
}
