//! Run configuration as flat `key = value` text.

use crate::afd::{DecoupleConfig, DecoupleMode};
use crate::dbscme::JointFusion;
use crate::encoders::Group;
use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{v}` for `{key}`")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn show_list<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

/// Span of the loss-averaging window for the change rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Window {
    #[default]
    Epoch,
    Steps(usize),
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "epoch" {
            return Ok(Window::Epoch);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Window::Steps(n)),
            _ => Err(Error::InvalidConfig(format!("window must be `epoch` or a step count, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Window::Epoch => f.write_str("epoch"),
            Window::Steps(n) => write!(f, "{n}"),
        }
    }
}

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from 1 at the first step to 0 after the last.
    Cosine,
}

impl Schedule {
    /// Multiplier at `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::InvalidConfig(format!("lr_schedule must be `constant` or `cosine`, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the batch gradient to at most this norm; 0 disables.
    pub clip_norm: f64,
    /// Multiplier on the uniform init bound `1/sqrt(fan_in)`.
    pub init_gain: f64,
    /// Trailing fraction of the dataset held out for validation.
    pub val_fraction: f64,

    pub channels: usize,
    pub d: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub d_c: usize,
    pub heads: usize,
    pub region: usize,
    pub top_k: usize,
    pub exclude_self: bool,
    pub hidden: usize,
    pub joint_hidden: usize,
    pub share_image: bool,
    pub share_mha: bool,
    pub joint_fusion: JointFusion,

    pub temperature: f64,
    /// Fixed per-task scales; empty means all ones.
    pub lambda: Vec<f64>,
    pub decouple: DecoupleConfig,
    pub window: Window,

    pub disable_dbscme: bool,
    pub disable_afd: bool,
    pub disable_spatial: bool,
    pub disable_channel: bool,
    pub disable_d_task: bool,
    pub disable_decouple: bool,
    pub single_task: Option<usize>,
    pub drop_task: Option<usize>,
    pub drop_modality: Vec<Group>,

    /// Record wall-clock milliseconds per epoch (breaks byte-identical CSVs).
    pub timing: bool,
    /// Run per-sample passes on one thread.
    pub sequential: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.05,
            lr_schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: 1.0,
            init_gain: 3f64.sqrt(),
            val_fraction: 0.25,
            channels: 4,
            d: 4,
            map_h: 4,
            map_w: 4,
            d_c: 8,
            heads: 8,
            region: 2,
            top_k: 4,
            exclude_self: false,
            hidden: 16,
            joint_hidden: 8,
            share_image: false,
            share_mha: false,
            joint_fusion: JointFusion::Mean,
            temperature: 2.0,
            lambda: Vec::new(),
            decouple: DecoupleConfig::default(),
            window: Window::Epoch,
            disable_dbscme: false,
            disable_afd: false,
            disable_spatial: false,
            disable_channel: false,
            disable_d_task: false,
            disable_decouple: false,
            single_task: None,
            drop_task: None,
            drop_modality: Vec::new(),
            timing: false,
            sequential: false,
        }
    }
}

/// Every key accepted by [`RunConfig::set`], in echo order.
pub const RUN_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_schedule",
    "momentum",
    "weight_decay",
    "clip_norm",
    "init_gain",
    "val_fraction",
    "channels",
    "d",
    "map_h",
    "map_w",
    "d_c",
    "heads",
    "region",
    "top_k",
    "exclude_self",
    "hidden",
    "joint_hidden",
    "share_image",
    "share_mha",
    "joint_fusion",
    "temperature",
    "lambda",
    "mu0",
    "mu_max",
    "ramp",
    "decouple_mode",
    "window",
    "disable_dbscme",
    "disable_afd",
    "disable_spatial",
    "disable_channel",
    "disable_d_task",
    "disable_decouple",
    "single_task",
    "drop_task",
    "drop_modality",
    "timing",
    "sequential",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "init_gain" => self.init_gain = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "map_h" => self.map_h = parse(key, v)?,
            "map_w" => self.map_w = parse(key, v)?,
            "d_c" => self.d_c = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "region" => self.region = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "exclude_self" => self.exclude_self = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "joint_hidden" => self.joint_hidden = parse(key, v)?,
            "share_image" => self.share_image = parse(key, v)?,
            "share_mha" => self.share_mha = parse(key, v)?,
            "joint_fusion" => self.joint_fusion = v.parse()?,
            "temperature" => self.temperature = parse(key, v)?,
            "lambda" => self.lambda = parse_list(key, v)?,
            "mu0" => self.decouple.mu0 = parse(key, v)?,
            "mu_max" => self.decouple.mu_max = parse(key, v)?,
            "ramp" => self.decouple.ramp = parse(key, v)?,
            "decouple_mode" => self.decouple.mode = v.parse::<DecoupleMode>()?,
            "window" => self.window = v.parse()?,
            "disable_dbscme" => self.disable_dbscme = parse(key, v)?,
            "disable_afd" => self.disable_afd = parse(key, v)?,
            "disable_spatial" => self.disable_spatial = parse(key, v)?,
            "disable_channel" => self.disable_channel = parse(key, v)?,
            "disable_d_task" => self.disable_d_task = parse(key, v)?,
            "disable_decouple" => self.disable_decouple = parse(key, v)?,
            "single_task" => self.single_task = parse_opt(key, v)?,
            "drop_task" => self.drop_task = parse_opt(key, v)?,
            "drop_modality" => self.drop_modality = parse_list(key, v)?,
            "timing" => self.timing = parse(key, v)?,
            "sequential" => self.sequential = parse(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lr_schedule" => self.lr_schedule.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "init_gain" => self.init_gain.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "channels" => self.channels.to_string(),
            "d" => self.d.to_string(),
            "map_h" => self.map_h.to_string(),
            "map_w" => self.map_w.to_string(),
            "d_c" => self.d_c.to_string(),
            "heads" => self.heads.to_string(),
            "region" => self.region.to_string(),
            "top_k" => self.top_k.to_string(),
            "exclude_self" => self.exclude_self.to_string(),
            "hidden" => self.hidden.to_string(),
            "joint_hidden" => self.joint_hidden.to_string(),
            "share_image" => self.share_image.to_string(),
            "share_mha" => self.share_mha.to_string(),
            "joint_fusion" => self.joint_fusion.to_string(),
            "temperature" => self.temperature.to_string(),
            "lambda" => show_list(&self.lambda),
            "mu0" => self.decouple.mu0.to_string(),
            "mu_max" => self.decouple.mu_max.to_string(),
            "ramp" => self.decouple.ramp.to_string(),
            "decouple_mode" => self.decouple.mode.to_string(),
            "window" => self.window.to_string(),
            "disable_dbscme" => self.disable_dbscme.to_string(),
            "disable_afd" => self.disable_afd.to_string(),
            "disable_spatial" => self.disable_spatial.to_string(),
            "disable_channel" => self.disable_channel.to_string(),
            "disable_d_task" => self.disable_d_task.to_string(),
            "disable_decouple" => self.disable_decouple.to_string(),
            "single_task" => show_opt(&self.single_task),
            "drop_task" => show_opt(&self.drop_task),
            "drop_modality" => {
                let names: Vec<&str> = self.drop_modality.iter().map(|g| g.name()).collect();
                show_list(&names)
            }
            "timing" => self.timing.to_string(),
            "sequential" => self.sequential.to_string(),
            _ => return None,
        })
    }

    /// Echo of every key, one `key = value` line each.
    pub fn to_text(&self) -> String {
        RUN_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Dynamic task weighting is on.
    pub fn uses_d_task(&self) -> bool {
        !(self.disable_afd || self.disable_d_task)
    }

    /// Decoupling penalty is on.
    pub fn uses_decouple(&self) -> bool {
        !(self.disable_afd || self.disable_decouple || self.disable_dbscme)
    }

    /// Whether task `j` contributes to the training loss.
    pub fn trains_task(&self, j: usize) -> bool {
        self.single_task.is_none_or(|s| s == j) && self.drop_task != Some(j)
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("need learning_rate >= 0 and 0 <= momentum < 1".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm {} must be >= 0", self.clip_norm));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return bad(format!("init_gain {} must be positive", self.init_gain));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if !self.lambda.is_empty() && self.lambda.len() != num_tasks {
            return bad(format!("{} lambdas for {num_tasks} tasks", self.lambda.len()));
        }
        for t in [self.single_task, self.drop_task].into_iter().flatten() {
            if t >= num_tasks {
                return bad(format!("task index {t} out of range for {num_tasks} tasks"));
            }
        }
        if (0..num_tasks).all(|j| !self.trains_task(j)) {
            return bad("no task left to train".into());
        }
        self.decouple.validate()
    }

    pub fn lambdas(&self, num_tasks: usize) -> Vec<f64> {
        if self.lambda.is_empty() {
            vec![1.0; num_tasks]
        } else {
            self.lambda.clone()
        }
    }
}

/// Named ablations: each is a list of `key = value` overrides on top of the
/// base configuration.
pub const ABLATIONS: &[(&str, &[(&str, &str)])] = &[
    ("full", &[]),
    ("plain", &[("disable_dbscme", "true"), ("disable_afd", "true")]),
    ("no-dbscme", &[("disable_dbscme", "true")]),
    ("no-afd", &[("disable_afd", "true")]),
    ("no-spatial", &[("disable_spatial", "true")]),
    ("no-channel", &[("disable_channel", "true")]),
    ("no-d-task", &[("disable_d_task", "true")]),
    ("no-decouple", &[("disable_decouple", "true")]),
    ("mu-zero", &[("mu0", "0"), ("mu_max", "0")]),
    ("drop-scene", &[("drop_modality", "scene")]),
    ("drop-driver", &[("drop_modality", "driver")]),
    ("drop-joints", &[("drop_modality", "joints")]),
];

/// `base` with the named ablation applied.
pub fn ablation(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let (_, overrides) = ABLATIONS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation `{name}`")))?;
    let mut cfg = base.clone();
    for (k, v) in overrides.iter() {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}
