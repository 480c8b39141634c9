//! Multi-temporal attention: every scale cross-attends to the concatenation
//! of all scales, then self-attends over its own backbone tokens followed by
//! every cross-attended sequence. Each scale's class token is read back from
//! the self-attention output, the class tokens are concatenated and fused by
//! an MLP into the multi-term embedding `p`, and a linear head maps `p` to
//! phase logits.
//!
//! Each scale's class token travels as row 0 of its token sequence, so a
//! sequence entering the module is `(1 + T') × D`.
//!
//! Attention is single-head with `d_k = D`. Projections are bias-free and
//! square; the self-attention value projection is its own matrix.

use serde::{Deserialize, Serialize};

use crate::backbone::SequenceVars;
use crate::error::{Error, Result};
use crate::nn::{attention, Bound, FeedForward, Init, Linear, ParamId, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtamConfig {
    pub num_scales: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Hidden width of the fusion MLP; `2·N·D` when absent.
    pub mlp_hidden: Option<usize>,
}

impl MtamConfig {
    pub fn embedding_width(&self) -> usize {
        self.num_scales * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.dim == 0 {
            return Err(Error::config("mtam", "num_scales and dim must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("data.num_phases", "must be positive"));
        }
        Ok(())
    }
}

/// The fused per-frame vector handed from stage one to stage two.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTermEmbedding<T> {
    /// Length `N·D`.
    pub p: Vec<T>,
    pub keyframe: usize,
    pub video_id: String,
}

#[derive(Clone, Debug)]
struct ScaleProjections {
    q: ParamId,
    k: ParamId,
    v: ParamId,
}

impl ScaleProjections {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize) -> Self {
        let mut w = |suffix: &str| {
            store.add(
                format!("{name}.{suffix}"),
                init.trunc_normal(&[d, d], INIT_STD),
            )
        };
        Self {
            q: w("wq"),
            k: w("wk"),
            v: w("wv"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mtam {
    cfg: MtamConfig,
    cross: Vec<ScaleProjections>,
    selfs: Vec<ScaleProjections>,
    mlp: FeedForward,
    head: Linear,
}

impl Mtam {
    /// Registers parameters under `mtam.` in `store`.
    pub fn new<T: Scalar>(
        cfg: MtamConfig,
        store: &mut ParamStore<T>,
        init: &mut Init,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let cross = (0..cfg.num_scales)
            .map(|i| ScaleProjections::new(store, init, &format!("mtam.mtca{i}"), d))
            .collect();
        let selfs = (0..cfg.num_scales)
            .map(|i| ScaleProjections::new(store, init, &format!("mtam.sa{i}"), d))
            .collect();
        let w = cfg.embedding_width();
        let hidden = cfg.mlp_hidden.unwrap_or(2 * w);
        let mlp = FeedForward::new(store, init, "mtam.mlp", w, hidden, w);
        let head = Linear::new(store, init, "mtam.head", w, cfg.num_classes, true);
        Ok(Self {
            cfg,
            cross,
            selfs,
            mlp,
            head,
        })
    }

    pub fn config(&self) -> &MtamConfig {
        &self.cfg
    }

    fn check_scales<T: Scalar>(&self, g: &Graph<T>, seqs: &[Var]) -> Result<()> {
        if seqs.len() != self.cfg.num_scales {
            return Err(Error::contract(format!(
                "expected {} scales, got {}",
                self.cfg.num_scales,
                seqs.len()
            )));
        }
        let first = g.value(seqs[0]).shape().to_vec();
        if first.len() != 2 || first[1] != self.cfg.dim {
            return Err(Error::contract(format!(
                "scale 0 has shape {first:?}, width must be {}",
                self.cfg.dim
            )));
        }
        for (i, &s) in seqs.iter().enumerate().skip(1) {
            if g.value(s).shape() != first.as_slice() {
                return Err(Error::contract(format!(
                    "scale {i} has shape {:?}, scale 0 has {first:?}",
                    g.value(s).shape()
                )));
            }
        }
        Ok(())
    }

    /// Cross-attention: queries from scale `i`, keys and values from the
    /// concatenation of all scales, with scale `i`'s projections. Each output
    /// has the shape of its query sequence.
    pub fn mtca<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, seqs: &[Var]) -> Result<Vec<Var>> {
        self.check_scales(g, seqs)?;
        let all = if seqs.len() == 1 {
            seqs[0]
        } else {
            g.concat_rows(seqs)?
        };
        seqs.iter()
            .zip(&self.cross)
            .map(|(&x, w)| {
                let q = g.matmul(x, p.get(w.q))?;
                let k = g.matmul(all, p.get(w.k))?;
                let v = g.matmul(all, p.get(w.v))?;
                attention(g, q, k, v, None)
            })
            .collect()
    }

    /// Self-attention of scale `scale` over `concat(l_i, c_1, …, c_N)`;
    /// output has `(N + 1)·rows(l_i)` rows.
    pub fn mtsa<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        scale: usize,
        own: Var,
        crossed: &[Var],
    ) -> Result<Var> {
        if crossed.len() != self.cfg.num_scales {
            return Err(Error::contract(format!(
                "self-attention needs {} cross-attended sequences, got {}",
                self.cfg.num_scales,
                crossed.len()
            )));
        }
        let w = self.selfs.get(scale).ok_or(Error::Bounds {
            index: scale,
            len: self.cfg.num_scales,
        })?;
        let mut parts = Vec::with_capacity(crossed.len() + 1);
        parts.push(own);
        parts.extend_from_slice(crossed);
        let joined = g.concat_rows(&parts)?;
        let q = g.matmul(joined, p.get(w.q))?;
        let k = g.matmul(joined, p.get(w.k))?;
        let v = g.matmul(joined, p.get(w.v))?;
        attention(g, q, k, v, None)
    }

    /// Concatenates the class tokens (each `1 × D`) into `p'`, fuses
    /// `p = MLP(p')` and applies the linear head. Returns `(p, logits)`.
    pub fn fuse_and_classify<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        cls: &[Var],
    ) -> Result<(Var, Var)> {
        if cls.len() != self.cfg.num_scales {
            return Err(Error::contract(format!(
                "expected {} class tokens, got {}",
                self.cfg.num_scales,
                cls.len()
            )));
        }
        let joined = g.concat_cols(cls)?;
        let fused = self.mlp.forward(g, p, joined)?;
        let logits = self.head.forward(g, p, fused)?;
        Ok((fused, logits))
    }

    /// Full module over the backbone outputs of all scales.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        scales: &[SequenceVars],
    ) -> Result<(Var, Var)> {
        let seqs = scales
            .iter()
            .map(|s| g.concat_rows(&[s.cls, s.tokens]))
            .collect::<Result<Vec<_>>>()?;
        let crossed = self.mtca(g, p, &seqs)?;
        let mut cls = Vec::with_capacity(seqs.len());
        for (i, &own) in seqs.iter().enumerate() {
            let out = self.mtsa(g, p, i, own, &crossed)?;
            cls.push(g.slice_rows(out, 0, 1)?);
        }
        self.fuse_and_classify(g, p, &cls)
    }

    /// Convenience wrapper over [`Mtam::mtca`] for plain tensors.
    pub fn mtca_values<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seqs: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vars: Vec<Var> = seqs.iter().map(|s| g.constant(s.clone())).collect();
        let out = self.mtca(&mut g, &p, &vars)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }
}
