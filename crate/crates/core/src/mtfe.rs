//! Multi-term frame encoder: pyramid sampling, the shared backbone over every
//! scale, and multi-temporal attention with its training head.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{Frame, FrameStore};
use crate::error::{Error, Result};
use crate::mtam::{Mtam, MtamConfig, MultiTermEmbedding};
use crate::nn::{Bound, Init, ParamStore};
use crate::sampler::{build_pyramid, gather_frames, PyramidSpec};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtfeConfig {
    pub backbone: BackboneConfig,
    pub pyramid: PyramidSpec,
    pub num_classes: usize,
    pub mlp_hidden: Option<usize>,
}

impl MtfeConfig {
    pub fn embedding_width(&self) -> usize {
        self.pyramid.num_scales() * self.backbone.embed_dim
    }
}

#[derive(Clone, Debug)]
pub struct Mtfe<T> {
    cfg: MtfeConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    mtam: Mtam,
}

impl<T: Scalar> Mtfe<T> {
    pub fn new(cfg: MtfeConfig, seed: u64) -> Result<Self> {
        if cfg.backbone.frames_per_seq != cfg.pyramid.frames_per_seq() {
            return Err(Error::config(
                "pyramid.frames",
                format!(
                    "backbone expects {} frames per sequence, pyramid gives {}",
                    cfg.backbone.frames_per_seq,
                    cfg.pyramid.frames_per_seq()
                ),
            ));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let backbone = Backbone::new(cfg.backbone.clone(), &mut params, &mut init)?;
        let mtam = Mtam::new(
            MtamConfig {
                num_scales: cfg.pyramid.num_scales(),
                dim: cfg.backbone.embed_dim,
                num_classes: cfg.num_classes,
                mlp_hidden: cfg.mlp_hidden,
            },
            &mut params,
            &mut init,
        )?;
        Ok(Self {
            cfg,
            params,
            backbone,
            mtam,
        })
    }

    pub fn config(&self) -> &MtfeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn mtam(&self) -> &Mtam {
        &self.mtam
    }

    /// Pyramid frames for one keyframe.
    pub fn sample<'a>(
        &self,
        store: &'a FrameStore,
        video_id: &str,
        keyframe: usize,
    ) -> Result<Vec<Vec<&'a Frame>>> {
        let len = store.video_len(video_id)?;
        let idx = build_pyramid(len, keyframe, &self.cfg.pyramid)?;
        gather_frames(store, video_id, &idx)
    }

    /// Returns `(p, logits)` graph handles, `1 × N·D` and `1 × classes`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &[Vec<&Frame>],
    ) -> Result<(Var, Var)> {
        if pyramid.len() != self.cfg.pyramid.num_scales() {
            return Err(Error::contract(format!(
                "expected {} pyramid levels, got {}",
                self.cfg.pyramid.num_scales(),
                pyramid.len()
            )));
        }
        let scales = pyramid
            .iter()
            .map(|frames| self.backbone.forward(g, p, frames))
            .collect::<Result<Vec<_>>>()?;
        self.mtam.forward(g, p, &scales)
    }

    /// Multi-term embedding and class probabilities for one keyframe.
    pub fn embed(
        &self,
        store: &FrameStore,
        video_id: &str,
        keyframe: usize,
    ) -> Result<(MultiTermEmbedding<T>, Vec<T>)> {
        let frames = self.sample(store, video_id, keyframe)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let (fused, logits) = self.forward(&mut g, &p, &frames)?;
        let probs = softmax_rows(g.value(logits)).into_values();
        let emb = MultiTermEmbedding {
            p: g.value(fused).values().to_vec(),
            keyframe,
            video_id: video_id.to_string(),
        };
        if !emb.p.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite embedding for {video_id}:{keyframe}"
            )));
        }
        Ok((emb, probs))
    }
}
