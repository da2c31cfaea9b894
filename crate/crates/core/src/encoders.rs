//! Per-modality encoders: MARNet for the six image streams and a small 3-D
//! CNN for the two joint sequences. Each produces a pooled vector and an
//! `[H', W', D]` map for the embedding stage.

use crate::attention::{hv_attention, region_attention, HvAttnParams, RegionAttnParams};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{avg_pool2d, Conv, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Front,
    Left,
    Right,
    Inside,
    Face,
    Body,
    Gesture,
    Posture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Scene,
    Driver,
    Joints,
}

impl Modality {
    /// Bundle order: scene views, driver views, joint streams.
    pub const ALL: [Modality; 8] = [
        Modality::Front,
        Modality::Left,
        Modality::Right,
        Modality::Inside,
        Modality::Face,
        Modality::Body,
        Modality::Gesture,
        Modality::Posture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Front => "front",
            Modality::Left => "left",
            Modality::Right => "right",
            Modality::Inside => "inside",
            Modality::Face => "face",
            Modality::Body => "body",
            Modality::Gesture => "gesture",
            Modality::Posture => "posture",
        }
    }

    pub fn group(self) -> Group {
        match self {
            Modality::Front | Modality::Left | Modality::Right => Group::Scene,
            Modality::Inside | Modality::Face | Modality::Body => Group::Driver,
            Modality::Gesture | Modality::Posture => Group::Joints,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_image(self) -> bool {
        self.group() != Group::Joints
    }
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Scene, Group::Driver, Group::Joints];

    pub fn name(self) -> &'static str {
        match self {
            Group::Scene => "scene",
            Group::Driver => "driver",
            Group::Joints => "joints",
        }
    }

    pub fn members(self) -> &'static [Modality] {
        match self {
            Group::Scene => &Modality::ALL[0..3],
            Group::Driver => &Modality::ALL[3..6],
            Group::Joints => &Modality::ALL[6..8],
        }
    }
}

impl std::str::FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown modality group `{s}`")))
    }
}

/// One multimodal sample: three scene views, three driver views, two joint
/// sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    /// front, left, right; each `[H, W, C_in]`
    pub scene: [Tensor; 3],
    /// inside, face, body; each `[H, W, C_in]`
    pub driver: [Tensor; 3],
    /// gesture, posture; each `[T, J, 3]`
    pub joints: [Tensor; 2],
}

impl ModalityBundle {
    pub fn get(&self, m: Modality) -> &Tensor {
        let i = m.index();
        match m.group() {
            Group::Scene => &self.scene[i],
            Group::Driver => &self.driver[i - 3],
            Group::Joints => &self.joints[i - 6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let img = self.scene[0].shape();
        let jt = self.joints[0].shape();
        if img.len() != 3 || jt.len() != 3 || jt[2] != 3 {
            return Err(shape_err("bundle", format!("image {img:?}, joints {jt:?}")));
        }
        for m in Modality::ALL {
            let t = self.get(m);
            let want = if m.is_image() { img } else { jt };
            if t.shape() != want {
                return Err(shape_err(
                    "bundle",
                    format!("{} has {:?}, expected {want:?}", m.name(), t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::InvalidConfig(format!("{} holds non-finite values", m.name())));
            }
        }
        Ok(())
    }
}

/// Encoder output on the graph.
#[derive(Clone, Copy, Debug)]
pub struct EncodedModality {
    /// `[D]`
    pub vector: Var,
    /// `[H', W', D]`
    pub map: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub c_in: usize,
    /// Stem width `C`.
    pub channels: usize,
    /// Output width `D`.
    pub d: usize,
    pub region: usize,
    pub top_k: usize,
    pub exclude_self: bool,
    pub map_h: usize,
    pub map_w: usize,
    /// Hidden width of the joint CNN's first layer.
    pub joint_hidden: usize,
    /// One set of image-encoder weights for all six image streams.
    pub share_image: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            c_in: 3,
            channels: 4,
            d: 4,
            region: 2,
            top_k: 4,
            exclude_self: false,
            map_h: 4,
            map_w: 4,
            joint_hidden: 8,
            share_image: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub stem: Conv,
    pub hv: HvAttnParams,
    pub region: RegionAttnParams,
    pub fc: Linear,
    pub map_h: usize,
    pub map_w: usize,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.channels;
        let stem = Conv::new(ps, &format!("{name}.stem"), &[3, 3], cfg.c_in, c)?;
        let hv = HvAttnParams::new(ps, &format!("{name}.hv"), c)?;
        let mut region = RegionAttnParams::new(ps, &format!("{name}.region"), c, cfg.region, cfg.top_k)?;
        region.exclude_self = cfg.exclude_self;
        let fc = Linear::new(ps, &format!("{name}.fc"), c, cfg.d, true)?;
        Ok(Self {
            stem,
            hv,
            region,
            fc,
            map_h: cfg.map_h,
            map_w: cfg.map_w,
        })
    }

    /// Stem, axial attention, routed attention; returns `F_x`.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = self.stem.forward(g, x)?;
        let s = g.relu(s);
        let f = hv_attention(g, s, &self.hv)?;
        region_attention(g, f, &self.region)
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<EncodedModality> {
        let f_x = self.features(g, x)?;
        let pooled = g.gap(f_x)?;
        let vector = self.fc.forward(g, pooled)?;
        let small = avg_pool2d(g, f_x, self.map_h, self.map_w)?;
        let map = self.fc.forward_map(g, small)?;
        Ok(EncodedModality { vector, map })
    }
}

/// Two 3x3x3 convolutions over `[T, J, 3]` (one input channel), then global
/// pooling. The map is a learned projection of the pooled vector.
#[derive(Clone, Debug)]
pub struct JointEncoder {
    pub conv1: Conv,
    pub conv2: Conv,
    pub to_map: Linear,
    pub d: usize,
    pub map_h: usize,
    pub map_w: usize,
}

impl JointEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(ps, &format!("{name}.conv1"), &[3, 3, 3], 1, cfg.joint_hidden)?,
            conv2: Conv::new(ps, &format!("{name}.conv2"), &[3, 3, 3], cfg.joint_hidden, cfg.d)?,
            to_map: Linear::new(ps, &format!("{name}.to_map"), cfg.d, cfg.map_h * cfg.map_w * cfg.d, true)?,
            d: cfg.d,
            map_h: cfg.map_h,
            map_w: cfg.map_w,
        })
    }

    /// Last-layer activations, `[T, J, 3, D]`.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != 3 || s[0] < 3 {
            return Err(shape_err("encode_joints", format!("input {s:?}, need [T>=3, J, 3]")));
        }
        let x = g.reshape(x, &[s[0], s[1], 3, 1])?;
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        Ok(g.relu(h))
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<EncodedModality> {
        let f = self.features(g, x)?;
        let vector = g.gap(f)?;
        let m = self.to_map.forward(g, vector)?;
        let map = g.reshape(m, &[self.map_h, self.map_w, self.d])?;
        Ok(EncodedModality { vector, map })
    }
}

/// All eight encoders, in [`Modality::ALL`] order.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub images: Vec<ImageEncoder>,
    pub joints: Vec<JointEncoder>,
    pub cfg: EncoderConfig,
}

impl Encoders {
    pub fn new(ps: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let mut images = Vec::with_capacity(6);
        for m in &Modality::ALL[..6] {
            let name = if cfg.share_image {
                "enc.image".to_string()
            } else {
                format!("enc.{}", m.name())
            };
            images.push(ImageEncoder::new(ps, &name, cfg)?);
        }
        let joints = Modality::ALL[6..]
            .iter()
            .map(|m| JointEncoder::new(ps, &format!("enc.{}", m.name()), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            images,
            joints,
            cfg: cfg.clone(),
        })
    }

    pub fn encode(&self, g: &mut Graph, m: Modality, x: Var) -> Result<EncodedModality> {
        let i = m.index();
        if m.is_image() {
            self.images[i].encode(g, x)
        } else {
            self.joints[i - 6].encode(g, x)
        }
    }

    /// Encodes every modality of `bundle`. Modalities in `dropped` groups are
    /// replaced by all-zero maps and vectors, and their encoders never run.
    pub fn encode_bundle(
        &self,
        g: &mut Graph,
        bundle: &ModalityBundle,
        dropped: &[Group],
    ) -> Result<Vec<EncodedModality>> {
        let (h, w, d) = (self.cfg.map_h, self.cfg.map_w, self.cfg.d);
        Modality::ALL
            .iter()
            .map(|&m| {
                if dropped.contains(&m.group()) {
                    let vector = g.constant(&[d], vec![0.0; d])?;
                    let map = g.constant(&[h, w, d], vec![0.0; h * w * d])?;
                    return Ok(EncodedModality { vector, map });
                }
                let x = g.input(bundle.get(m));
                self.encode(g, m, x)
            })
            .collect()
    }
}
