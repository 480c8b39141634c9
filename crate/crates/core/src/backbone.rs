//! Compact spatio-temporal encoder standing in for a video transformer
//! backbone.
//!
//! A sequence of `T` frames is cut into space-time patches of
//! `temporal_pool × patch × patch` pixels, linearly projected to `D`, offset
//! by a learned position table, and prefixed with a learned class token.
//! Pre-norm transformer blocks follow. The class token's output row is
//! `cls_i`; the patch rows are averaged over space within each temporal slot,
//! giving `T' = T / temporal_pool` tokens.

use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::nn::{Bound, EncoderBlock, Init, Linear, ParamId, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub temporal_pool: usize,
    pub patch: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub frames_per_seq: usize,
    pub ff_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            depth: 2,
            heads: 4,
            temporal_pool: 2,
            patch: 8,
            frame_height: 32,
            frame_width: 32,
            frames_per_seq: 16,
            ff_mult: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(format!("backbone.{k}"), m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(
                "heads",
                format!(
                    "embed_dim {} not divisible by heads {}",
                    self.embed_dim, self.heads
                ),
            );
        }
        if self.temporal_pool == 0 || self.frames_per_seq % self.temporal_pool != 0 {
            return bad(
                "temporal_pool",
                format!(
                    "{} frames not divisible by temporal_pool {}",
                    self.frames_per_seq, self.temporal_pool
                ),
            );
        }
        if self.patch == 0
            || self.frame_height % self.patch != 0
            || self.frame_width % self.patch != 0
        {
            return bad(
                "patch",
                format!(
                    "{}x{} frames not divisible into {} px patches",
                    self.frame_height, self.frame_width, self.patch
                ),
            );
        }
        if self.ff_mult == 0 {
            return bad("ff_mult", "must be positive".into());
        }
        Ok(())
    }

    /// `T'`.
    pub fn temporal_tokens(&self) -> usize {
        self.frames_per_seq / self.temporal_pool
    }

    pub fn spatial_tokens(&self) -> usize {
        (self.frame_height / self.patch) * (self.frame_width / self.patch)
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        1 + self.temporal_tokens() * self.spatial_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.temporal_pool * self.patch * self.patch * 3
    }
}

/// One scale's backbone output.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding<T> {
    /// `T' × D`.
    pub tokens: Tensor<T>,
    /// `1 × D`.
    pub cls: Tensor<T>,
}

/// Graph handles for a [`SequenceEmbedding`].
#[derive(Clone, Copy, Debug)]
pub struct SequenceVars {
    pub tokens: Var,
    pub cls: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    proj: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
}

impl Backbone {
    /// Registers parameters under `backbone.` in `store`.
    pub fn new<T: Scalar>(
        cfg: BackboneConfig,
        store: &mut ParamStore<T>,
        init: &mut Init,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let proj = Linear::new(store, init, "backbone.patch_proj", cfg.patch_dim(), d, true);
        let cls = store.add("backbone.cls_token", init.trunc_normal(&[1, d], INIT_STD));
        let pos = store.add(
            "backbone.pos_embed",
            Tensor::zeros(&[cfg.num_tokens() - 1, d]),
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    init,
                    &format!("backbone.block{i}"),
                    d,
                    cfg.heads,
                    cfg.ff_mult * d,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            proj,
            cls,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Space-time patch matrix, one row per patch in (slot, row, col) order,
    /// pixel values mapped to `(v/255 − PIXEL_MEAN) / PIXEL_STD`.
    pub fn patchify<T: Scalar>(&self, frames: &[&Frame]) -> Result<Tensor<T>> {
        let c = &self.cfg;
        if frames.len() != c.frames_per_seq {
            return Err(Error::config(
                "backbone.frames_per_seq",
                format!("expected {} frames, got {}", c.frames_per_seq, frames.len()),
            ));
        }
        if let Some(f) = frames
            .iter()
            .find(|f| f.height() != c.frame_height || f.width() != c.frame_width)
        {
            return Err(Error::config(
                "backbone.frame_size",
                format!(
                    "frame is {}x{}, model expects {}x{}",
                    f.height(),
                    f.width(),
                    c.frame_height,
                    c.frame_width
                ),
            ));
        }
        let (gh, gw) = (c.frame_height / c.patch, c.frame_width / c.patch);
        let n = c.temporal_tokens() * gh * gw;
        let pd = c.patch_dim();
        let scale = T::lit(1.0 / (255.0 * PIXEL_STD));
        let shift = T::lit(PIXEL_MEAN / PIXEL_STD);
        let mut vals = Vec::with_capacity(n * pd);
        for slot in 0..c.temporal_tokens() {
            for py in 0..gh {
                for px in 0..gw {
                    for f in &frames[slot * c.temporal_pool..(slot + 1) * c.temporal_pool] {
                        for y in py * c.patch..(py + 1) * c.patch {
                            for x in px * c.patch..(px + 1) * c.patch {
                                for ch in 0..3 {
                                    vals.push(
                                        T::from_count(f.at(y, x, ch) as usize) * scale - shift,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, pd], vals)
    }

    /// `[cls; proj(patches) + pos]`, shape `num_tokens × D`.
    pub fn tokenize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        frames: &[&Frame],
    ) -> Result<Var> {
        let patches = g.constant(self.patchify(frames)?);
        let x = self.proj.forward(g, p, patches)?;
        let x = g.add(x, p.get(self.pos))?;
        g.concat_rows(&[p.get(self.cls), x])
    }

    /// Runs the blocks and splits the output into class token and
    /// temporally pooled patch tokens.
    pub fn encode_sequence<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
    ) -> Result<SequenceVars> {
        let rows = g.value(tokens).rows();
        if rows != self.cfg.num_tokens() {
            return Err(Error::contract(format!(
                "expected {} tokens, got {rows}",
                self.cfg.num_tokens()
            )));
        }
        let mut x = tokens;
        for b in &self.blocks {
            x = b.forward(g, p, x, None)?;
        }
        let cls = g.slice_rows(x, 0, 1)?;
        let patches = g.slice_rows(x, 1, rows - 1)?;
        let pooled = g.mean_row_groups(patches, self.cfg.spatial_tokens())?;
        Ok(SequenceVars {
            tokens: pooled,
            cls,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        frames: &[&Frame],
    ) -> Result<SequenceVars> {
        let t = self.tokenize(g, p, frames)?;
        self.encode_sequence(g, p, t)
    }

    /// Inference without gradient tracking.
    pub fn embed<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        frames: &[&Frame],
    ) -> Result<SequenceEmbedding<T>> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let s = self.forward(&mut g, &p, frames)?;
        Ok(SequenceEmbedding {
            tokens: g.value(s.tokens).clone(),
            cls: g.value(s.cls).clone(),
        })
    }
}
