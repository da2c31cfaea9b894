//! Seeded synthetic multimodal multi-task benchmark.
//!
//! Every sample draws a shared latent `z_sh` and one latent `z_j` per task
//! from a unit Gaussian. Each modality is a fixed random linear mixture of
//! all latents, modulated by a smooth spatial (or temporal) pattern, plus
//! Gaussian noise. Driver-side streams carry the first half of the task
//! latents strongly, scene views the second half; everything carries `z_sh`.
//! Task `j`'s clean label is the argmax of a fixed readout of `(z_sh, z_j)`;
//! with probability `label_noise` it is replaced by a uniform draw.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_tensor, read_u32, write_tensor, write_u32};
use crate::encoders::{Group, Modality, ModalityBundle};
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"UVDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Readout {
    /// Rows of a random orthogonal matrix (Gaussian rows past the latent width).
    #[default]
    Random,
    /// Class `c` reads latent coordinate `c`.
    Indicator,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Readout::Random),
            "indicator" => Ok(Readout::Indicator),
            _ => Err(Error::InvalidConfig(format!("unknown readout `{s}`"))),
        }
    }
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Readout::Random => "random",
            Readout::Indicator => "indicator",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub frames: usize,
    pub joints: usize,
    pub shared_dim: usize,
    pub task_dim: usize,
    pub num_classes: Vec<usize>,
    pub label_noise: Vec<f64>,
    /// Per-value observation noise standard deviation.
    pub noise: f64,
    /// Mixing gain of a task latent in its own modality group.
    pub heavy: f64,
    /// Mixing gain of a task latent elsewhere.
    pub light: f64,
    pub readout: Readout,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_samples: 256,
            height: 8,
            width: 8,
            c_in: 3,
            frames: 4,
            joints: 5,
            shared_dim: 2,
            task_dim: 2,
            num_classes: vec![4; 4],
            label_noise: vec![0.30, 0.25, 0.05, 0.15],
            noise: 0.5,
            heavy: 1.0,
            light: 0.15,
            readout: Readout::Random,
        }
    }
}

/// Every key accepted by [`GenConfig::set`].
pub const GEN_KEYS: &[&str] = &[
    "seed",
    "num_samples",
    "height",
    "width",
    "c_in",
    "frames",
    "joints",
    "shared_dim",
    "task_dim",
    "num_classes",
    "label_noise",
    "noise",
    "heavy",
    "light",
    "readout",
];

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_one(key, x)).collect()
}

impl GenConfig {
    pub fn num_tasks(&self) -> usize {
        self.num_classes.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.shared_dim + self.num_tasks() * self.task_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes.is_empty() || self.num_classes.len() != self.label_noise.len() {
            return bad(format!(
                "{} class counts for {} noise levels",
                self.num_classes.len(),
                self.label_noise.len()
            ));
        }
        if self.num_classes.iter().any(|&k| k < 2) {
            return bad("every task needs at least two classes".into());
        }
        if self.label_noise.iter().any(|&v| !(0.0..0.5).contains(&v)) {
            return bad(format!("label noise must lie in [0, 0.5): {:?}", self.label_noise));
        }
        if self.height == 0 || self.width == 0 || self.c_in == 0 || self.joints == 0 || self.frames < 3 {
            return bad("extents must be positive and frames >= 3".into());
        }
        if self.shared_dim + self.task_dim == 0 || !(self.noise >= 0.0) {
            return bad("empty readout latent or negative noise".into());
        }
        if self.readout == Readout::Indicator
            && self.num_classes.iter().any(|&k| k > self.shared_dim + self.task_dim)
        {
            return bad("indicator readout needs classes <= readout latent width".into());
        }
        Ok(())
    }

    /// Flat `key = value` text, one entry per line.
    pub fn to_text(&self) -> String {
        format!(
            "seed = {}\nnum_samples = {}\nheight = {}\nwidth = {}\nc_in = {}\nframes = {}\n\
             joints = {}\nshared_dim = {}\ntask_dim = {}\nnum_classes = {}\nlabel_noise = {}\n\
             noise = {}\nheavy = {}\nlight = {}\nreadout = {}\n",
            self.seed,
            self.num_samples,
            self.height,
            self.width,
            self.c_in,
            self.frames,
            self.joints,
            self.shared_dim,
            self.task_dim,
            list(&self.num_classes),
            list(&self.label_noise),
            self.noise,
            self.heavy,
            self.light,
            self.readout,
        )
    }

    /// Applies one `key`, `value` pair; keys are those of [`GEN_KEYS`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_one(key, v)?,
            "num_samples" => self.num_samples = parse_one(key, v)?,
            "height" => self.height = parse_one(key, v)?,
            "width" => self.width = parse_one(key, v)?,
            "c_in" => self.c_in = parse_one(key, v)?,
            "frames" => self.frames = parse_one(key, v)?,
            "joints" => self.joints = parse_one(key, v)?,
            "shared_dim" => self.shared_dim = parse_one(key, v)?,
            "task_dim" => self.task_dim = parse_one(key, v)?,
            "num_classes" => self.num_classes = parse_list(key, v)?,
            "label_noise" => self.label_noise = parse_list(key, v)?,
            "noise" => self.noise = parse_one(key, v)?,
            "heavy" => self.heavy = parse_one(key, v)?,
            "light" => self.light = parse_one(key, v)?,
            "readout" => self.readout = v.trim().parse()?,
            _ => return Err(Error::InvalidConfig(format!("unknown dataset key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = GenConfig::default();
        for (k, v) in crate::config::parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// The modality group that carries task `j`'s latent strongly. The first
    /// half of the tasks is driver-side, alternating between driver views and
    /// joint streams; the rest belongs to the scene views.
    pub fn home_group(&self, j: usize) -> Group {
        if 2 * j >= self.num_tasks() {
            Group::Scene
        } else if j % 2 == 0 {
            Group::Driver
        } else {
            Group::Joints
        }
    }

    pub fn carries(&self, group: Group, j: usize) -> bool {
        self.home_group(j) == group
    }
}

/// Fixed, seed-derived mixing and readout parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixing {
    /// Per modality: `[rows, latent]` gains (row-major). Image rows are
    /// channels; joint rows are the three coordinates, shared by every joint.
    pub gains: Vec<Vec<f64>>,
    /// Per modality and latent: pattern frequencies and phase.
    pub patterns: Vec<Vec<(f64, f64, f64)>>,
    /// Per task: `[classes, shared_dim + task_dim]` readout rows.
    pub readouts: Vec<Vec<Vec<f64>>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn readout_rows(rng: &mut ChaCha8Rng, classes: usize, width: usize, kind: Readout) -> Vec<Vec<f64>> {
    if kind == Readout::Indicator {
        return (0..classes)
            .map(|c| (0..width).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
            .collect();
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..width).map(|_| normal(rng)).collect();
        // orthogonalise while there is room
        if rows.len() < width {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        rows.push(v);
    }
    rows
}

impl Mixing {
    pub fn new(cfg: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let d = cfg.latent_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut gains = Vec::with_capacity(8);
        let mut patterns = Vec::with_capacity(8);
        for m in Modality::ALL {
            let rows = gain_rows(cfg, m);
            let mut g = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                for i in 0..d {
                    let s = latent_gain(cfg, m.group(), i);
                    g.push(normal(&mut rng) * s * scale);
                }
            }
            gains.push(g);
            let p = (0..d)
                .map(|_| {
                    let fa = rng.random_range(0..3) as f64;
                    let fb = rng.random_range(0..3) as f64;
                    let phase = rng.random::<f64>() * std::f64::consts::TAU;
                    (fa, fb, phase)
                })
                .collect();
            patterns.push(p);
        }
        let readouts = cfg
            .num_classes
            .iter()
            .map(|&k| readout_rows(&mut rng, k, cfg.shared_dim + cfg.task_dim, cfg.readout))
            .collect();
        Self {
            gains,
            patterns,
            readouts,
        }
    }

    /// Clean (noise-free) label of task `j` for latent vector `z`.
    pub fn clean_label(&self, cfg: &GenConfig, z: &[f64], j: usize) -> usize {
        let ts = cfg.shared_dim + j * cfg.task_dim;
        let x: Vec<f64> = z[..cfg.shared_dim]
            .iter()
            .chain(&z[ts..ts + cfg.task_dim])
            .copied()
            .collect();
        let scores: Vec<f64> = self.readouts[j]
            .iter()
            .map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        argmax(&scores)
    }
}

fn gain_rows(cfg: &GenConfig, m: Modality) -> usize {
    if m.is_image() {
        cfg.c_in
    } else {
        3
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn latent_gain(cfg: &GenConfig, group: Group, i: usize) -> f64 {
    if i < cfg.shared_dim {
        return 1.0;
    }
    let j = (i - cfg.shared_dim) / cfg.task_dim;
    if cfg.carries(group, j) {
        cfg.heavy
    } else {
        cfg.light
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub bundle: ModalityBundle,
    pub labels: Vec<usize>,
    /// `z_sh` followed by each `z_j`.
    pub latents: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub samples: Vec<Sample>,
}

fn render(cfg: &GenConfig, mix: &Mixing, m: Modality, z: &[f64], rng: &mut ChaCha8Rng) -> Tensor {
    let d = z.len();
    let gains = &mix.gains[m.index()];
    let pats = &mix.patterns[m.index()];
    let (positions, rows, shape): (Vec<(f64, f64)>, usize, Vec<usize>) = if m.is_image() {
        let pos = (0..cfg.height)
            .flat_map(|h| {
                (0..cfg.width).map(move |w| (h as f64 / cfg.height as f64, w as f64 / cfg.width as f64))
            })
            .collect();
        (pos, cfg.c_in, vec![cfg.height, cfg.width, cfg.c_in])
    } else {
        let pos = (0..cfg.frames).map(|t| (t as f64 / cfg.frames as f64, 0.0)).collect();
        (pos, cfg.joints * 3, vec![cfg.frames, cfg.joints, 3])
    };
    let mut data = Vec::with_capacity(positions.len() * rows);
    for &(a, b) in &positions {
        let modulated: Vec<f64> = (0..d)
            .map(|i| {
                let (fa, fb, ph) = pats[i];
                z[i] * (1.0 + 0.5 * (std::f64::consts::TAU * (fa * a + fb * b) + ph).cos())
            })
            .collect();
        for r in 0..rows {
            let gr = r % gain_rows(cfg, m);
            let g = &gains[gr * d..(gr + 1) * d];
            let s: f64 = g.iter().zip(&modulated).map(|(x, y)| x * y).sum();
            data.push(s + cfg.noise * normal(rng));
        }
    }
    Tensor::new(shape, data).expect("rendered shape matches its data")
}

fn sample_at(cfg: &GenConfig, mix: &Mixing, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let latents: Vec<f64> = (0..cfg.latent_dim()).map(|_| normal(&mut rng)).collect();
    let mut labels = Vec::with_capacity(cfg.num_tasks());
    for j in 0..cfg.num_tasks() {
        let clean = mix.clean_label(cfg, &latents, j);
        let flip = rng.random::<f64>() < cfg.label_noise[j];
        let resampled = rng.random_range(0..cfg.num_classes[j]);
        labels.push(if flip { resampled } else { clean });
    }
    let mut it = Modality::ALL.iter().map(|&m| render(cfg, mix, m, &latents, &mut rng));
    let mut next = || it.next().expect("eight modalities");
    let scene = [next(), next(), next()];
    let driver = [next(), next(), next()];
    let joints = [next(), next()];
    Sample {
        bundle: ModalityBundle { scene, driver, joints },
        labels,
        latents,
    }
}

/// Generates the dataset described by `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    generate_with(cfg, Execution::default())
}

pub fn generate_with(cfg: &GenConfig, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    let mix = Mixing::new(cfg);
    let idx: Vec<usize> = (0..cfg.num_samples).collect();
    let samples = exec.map(&idx, |&i| sample_at(cfg, &mix, i));
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.config.num_tasks()
    }

    /// Labels the noise-free readout would assign from the true latents.
    pub fn oracle_predictions(&self) -> Vec<Vec<usize>> {
        let mix = Mixing::new(&self.config);
        (0..self.num_tasks())
            .map(|j| {
                self.samples
                    .iter()
                    .map(|s| mix.clean_label(&self.config, &s.latents, j))
                    .collect()
            })
            .collect()
    }

    pub fn labels(&self, j: usize) -> Vec<usize> {
        self.samples.iter().map(|s| s.labels[j]).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        write_u32(&mut out, DATASET_VERSION)?;
        let text = self.config.to_text();
        write_u32(&mut out, text.len() as u32)?;
        out.write_all(text.as_bytes())?;
        write_u32(&mut out, self.samples.len() as u32)?;
        for s in &self.samples {
            for m in Modality::ALL {
                write_tensor(&mut out, m.name(), s.bundle.get(m))?;
            }
            let z = Tensor::new(vec![s.latents.len()], s.latents.clone())?;
            write_tensor(&mut out, "latents", &z)?;
            for &l in &s.labels {
                write_u32(&mut out, l as u32)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("missing dataset magic".into()))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config = GenConfig::from_text(&text)?;
        let count = read_u32(&mut r)? as usize;
        let mut samples = Vec::with_capacity(count);
        let next = |r: &mut Cursor<&[u8]>, want: &str| -> Result<Tensor> {
            match read_tensor(r)? {
                Some((name, t)) if name == want => Ok(t),
                Some((name, _)) => Err(Error::Format(format!("expected `{want}`, found `{name}`"))),
                None => Err(Error::Format(format!("truncated before `{want}`"))),
            }
        };
        for _ in 0..count {
            let mut t: BTreeMap<Modality, Tensor> = BTreeMap::new();
            for m in Modality::ALL {
                t.insert(m, next(&mut r, m.name())?);
            }
            let latents = next(&mut r, "latents")?.into_data();
            let labels = (0..config.num_tasks())
                .map(|_| read_u32(&mut r).map(|l| l as usize))
                .collect::<Result<Vec<_>>>()?;
            let mut take = |m: Modality| t.remove(&m).unwrap();
            let bundle = ModalityBundle {
                scene: [take(Modality::Front), take(Modality::Left), take(Modality::Right)],
                driver: [take(Modality::Inside), take(Modality::Face), take(Modality::Body)],
                joints: [take(Modality::Gesture), take(Modality::Posture)],
            };
            samples.push(Sample {
                bundle,
                labels,
                latents,
            });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after dataset".into()));
        }
        Ok(Self { config, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Hex SHA-256 of the encoded dataset.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(&self.encode()?))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
