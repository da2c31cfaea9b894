//! The full network: eight modality encoders feeding the embedding and heads.

use crate::config::RunConfig;
use crate::dbscme::{Dbscme, DbscmeConfig, TaskOutputs};
use crate::encoders::{EncoderConfig, Encoders, Group, ModalityBundle};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::synth::GenConfig;

#[derive(Clone, Debug)]
pub struct Model {
    pub encoders: Encoders,
    pub dbscme: Dbscme,
    /// Skip the embedding and classify the pooled channel concat.
    pub plain: bool,
    pub dropped: Vec<Group>,
}

impl Model {
    /// Builds the model for data shaped like `data`, registering its
    /// parameters in `ps`.
    pub fn new(ps: &mut ParamStore, cfg: &RunConfig, data: &GenConfig) -> Result<Self> {
        check_compatible(cfg, data)?;
        let enc = EncoderConfig {
            c_in: data.c_in,
            channels: cfg.channels,
            d: cfg.d,
            region: cfg.region,
            top_k: cfg.top_k,
            exclude_self: cfg.exclude_self,
            map_h: cfg.map_h,
            map_w: cfg.map_w,
            joint_hidden: cfg.joint_hidden,
            share_image: cfg.share_image,
        };
        let emb = DbscmeConfig {
            d: cfg.d,
            heads: cfg.heads,
            d_c: cfg.d_c,
            hidden: cfg.hidden,
            num_classes: data.num_classes.clone(),
            se_reduction: 4,
            share_mha: cfg.share_mha,
            joint_fusion: cfg.joint_fusion,
            disable_spatial: cfg.disable_spatial,
            disable_channel: cfg.disable_channel,
        };
        Ok(Self {
            encoders: Encoders::new(ps, &enc)?,
            dbscme: Dbscme::new(ps, &emb)?,
            plain: cfg.disable_dbscme,
            dropped: cfg.drop_modality.clone(),
        })
    }

    /// Fresh parameters seeded by `cfg.seed` and scaled by `cfg.init_gain`.
    pub fn init(cfg: &RunConfig, data: &GenConfig) -> Result<(Self, ParamStore)> {
        let mut ps = ParamStore::with_gain(cfg.seed, cfg.init_gain);
        let model = Self::new(&mut ps, cfg, data)?;
        Ok((model, ps))
    }

    pub fn num_tasks(&self) -> usize {
        self.dbscme.tasks.len()
    }

    pub fn forward(&self, g: &mut Graph, bundle: &ModalityBundle) -> Result<TaskOutputs> {
        let enc = self.encoders.encode_bundle(g, bundle, &self.dropped)?;
        let maps: Vec<_> = enc.iter().map(|e| e.map).collect();
        if self.plain {
            self.dbscme.plain_forward(g, &maps)
        } else {
            self.dbscme.forward(g, &maps)
        }
    }
}

fn check_compatible(cfg: &RunConfig, data: &GenConfig) -> Result<()> {
    let (h, w) = (data.height, data.width);
    let mismatch = |m: String| Err(Error::ConfigMismatch(m));
    if cfg.region == 0 || h % cfg.region != 0 || w % cfg.region != 0 {
        return mismatch(format!("region side {} does not divide {h}x{w}", cfg.region));
    }
    let regions = (h / cfg.region) * (w / cfg.region) - usize::from(cfg.exclude_self);
    if cfg.top_k == 0 || cfg.top_k > regions {
        return mismatch(format!("top_k {} with {regions} candidate regions", cfg.top_k));
    }
    if cfg.map_h == 0 || cfg.map_w == 0 || h % cfg.map_h != 0 || w % cfg.map_w != 0 {
        return mismatch(format!("map {}x{} does not tile {h}x{w}", cfg.map_h, cfg.map_w));
    }
    if data.frames < 3 {
        return mismatch(format!("{} frames, need at least 3", data.frames));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    #[test]
    fn rejects_incompatible_dims() {
        let data = GenConfig::default();
        let cfg = RunConfig {
            region: 3,
            ..Default::default()
        };
        assert!(matches!(Model::init(&cfg, &data), Err(Error::ConfigMismatch(_))));
        let cfg = RunConfig {
            top_k: 17,
            ..Default::default()
        };
        assert!(matches!(Model::init(&cfg, &data), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn forward_produces_all_tasks() {
        let data = GenConfig {
            num_samples: 1,
            ..Default::default()
        };
        let ds = generate(&data).unwrap();
        for plain in [false, true] {
            let cfg = RunConfig {
                disable_dbscme: plain,
                ..Default::default()
            };
            let (model, ps) = Model::init(&cfg, &data).unwrap();
            let mut g = Graph::with_params(&ps);
            let out = model.forward(&mut g, &ds.samples[0].bundle).unwrap();
            assert_eq!(out.logits.len(), 4);
            assert!(out.logits.iter().all(|&l| g.shape(l) == [4]));
        }
    }
}
