//! Parameter storage and the transformer building blocks shared by the
//! backbone, the multi-temporal attention module and the consistency module.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{checkpoint, Gradients, Graph, Tensor, Var, LAYER_NORM_EPS};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Graph leaves for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps graph leaves that line up one-to-one with a store's parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        t.set_requires_grad(true);
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Inserts every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Inserts every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Adds `scale · ∂/∂param` from `grads` into each parameter's grad slot.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>, scale: T) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(d) = grads.get(v) {
                if scale == T::one() {
                    t.accumulate_grad(d)?;
                } else {
                    let s: Vec<T> = d.iter().map(|&x| x * scale).collect();
                    t.accumulate_grad(&s)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Overwrites values from `(name, tensor)` pairs. Every parameter must be
    /// present with an identical shape; extra entries are an error.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Store(format!(
                "expected {} parameters, found {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let &i = self
                .index
                .get(&name)
                .ok_or_else(|| Error::Store(format!("unknown parameter {name}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Store(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            let mut t = t;
            t.set_requires_grad(true);
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.named())
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        self.load_named(checkpoint::load(path)?)
    }

    /// SHA-256 of the checkpoint encoding; equal hashes mean equal parameters.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        checkpoint::write_checkpoint(&mut buf, &self.named()).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std²) resampled until within two standard deviations.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let vals = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::lit(z * std);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), vals).expect("init shape")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            init.trunc_normal(&[d_in, d_out], INIT_STD),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out])));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.w))?;
        match self.b {
            Some(b) => g.add_row(y, p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(
            x,
            p.get(self.gamma),
            p.get(self.beta),
            T::lit(LAYER_NORM_EPS),
        )
    }
}

/// `softmax(q·kᵀ / √d + mask) · v` for one head.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let d = g.value(q).cols();
    let scores = g.matmul_nt(q, k)?;
    let mut scores = g.scale(scores, T::from_count(d).sqrt().recip());
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let probs = g.softmax_rows(scores);
    g.matmul(probs, v)
}

/// Additive mask letting row `i` attend to columns `0..=i` only.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    let big = T::lit(-1e30);
    for i in 0..n {
        for j in i + 1..n {
            m.values_mut()[i * n + j] = big;
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(
                format!("{name}.heads"),
                format!("width {dim} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            // a key bias shifts each score row uniformly, so softmax ignores it
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, false),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(store, init, &format!("{name}.o"), dim, dim, true),
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let dim = g.value(x).cols();
        let dh = dim / self.heads;
        let out = if self.heads == 1 {
            attention(g, q, k, v, mask)?
        } else {
            let mut outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                outs.push(attention(g, qh, kh, vh, mask)?);
            }
            g.concat_cols(&outs)?
        };
        self.o.forward(g, p, out)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, d_out, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer encoder block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), dim, ff_hidden, dim),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.ff.forward(g, p, h)?;
        g.add(x, h)
    }
}
