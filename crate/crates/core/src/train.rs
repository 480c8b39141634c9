//! Optimization for both stages: cross-entropy, AdamW with decoupled decay,
//! the cosine schedule, and the MTFE and TCM training loops.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, FrameStore};
use crate::error::{Error, Result};
use crate::mtfe::Mtfe;
use crate::nn::ParamStore;
use crate::sampler::Mode;
use crate::scalar::Scalar;
use crate::tcm::{schedule_windows, Tcm};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Keep every n-th training sample (keyframes for MTFE, windows for TCM).
    pub sample_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 5,
            batch_size: 8,
            seed: 0,
            mode: Mode::Offline,
            sample_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.sample_stride == 0 {
            return Err(Error::config("sample_stride", "must be positive"));
        }
        Ok(())
    }
}

/// Mean of `−log softmax(logits)[label]` over rows, via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (b, c) = logits.dims2();
    if labels.len() != b {
        return Err(Error::contract(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::contract(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        total += lse - row[y].as_f64();
    }
    Ok(T::lit(total / b as f64))
}

/// `lr0 · ½(1 + cos(π·step/total))`, holding the final value past `total`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s / total_steps as f64).cos())
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update from the gradients stored on each parameter. Parameters
/// without a gradient are treated as having a zero gradient.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, t) in params.names().iter().zip(params.tensors()) {
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in {name}[{i}] at step {}",
                    state.step + 1
                )));
            }
        }
    }
    state.step += 1;
    let t_step = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t_step);
    let bc2 = T::one() - b2.powi(t_step);
    let decay = T::one() - T::lit(lr * cfg.weight_decay);
    let lr = T::lit(lr);
    let eps = T::lit(cfg.eps);
    for (k, t) in params.tensors_mut().iter_mut().enumerate() {
        let grad = t.take_grad();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in t.values_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w *= decay;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub max_grad_norm: f64,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Store(format!("{}: {e}", path.display())))?;
        for row in &self.epochs {
            w.serialize(row).map_err(|e| Error::Store(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Step losses as hex bit patterns, one per line, for bitwise replay checks.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for l in &self.step_losses {
            writeln!(f, "{:016x}", l.to_bits()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn grad_norm<T: Scalar>(params: &ParamStore<T>) -> f64 {
    params
        .tensors()
        .iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Shared batch loop. `run` builds one sample's graph, backpropagates it with
/// the given gradient scale and returns `(loss, correct, count)`.
fn run_epochs<T: Scalar, S: Clone>(
    params: &mut ParamStore<T>,
    samples: &[S],
    cfg: &TrainConfig,
    tag: &str,
    mut run: impl FnMut(&mut ParamStore<T>, &S, T) -> Result<(f64, usize, usize)>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract(format!("{tag}: empty training set")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(params);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut count) = (0.0, 0usize, 0usize);
        let mut lr = cfg.lr0;
        for batch in order.chunks(cfg.batch_size) {
            params.zero_grad();
            let scale = T::one() / T::from_count(batch.len());
            let mut batch_loss = 0.0;
            for &i in batch {
                let (l, c, n) = run(params, &samples[i], scale)?;
                batch_loss += l;
                correct += c;
                count += n;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "{tag}: non-finite loss at step {step}"
                )));
            }
            log.max_grad_norm = log.max_grad_norm.max(grad_norm(params));
            lr = cosine_lr(step, total, cfg.lr0);
            adamw_step(params, &mut state, lr, cfg)?;
            step += 1;
            batch_loss /= batch.len() as f64;
            log.step_losses.push(batch_loss);
            loss_sum += batch_loss * batch.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            split: "train".into(),
            loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / count.max(1) as f64,
            lr,
        };
        log::info!(
            "{tag} epoch {epoch}: loss {:.5} acc {:.4} lr {:.3e}",
            entry.loss,
            entry.accuracy,
            entry.lr
        );
        log.epochs.push(entry);
    }
    log::info!("{tag}: max grad norm {:.4e}", log.max_grad_norm);
    Ok(log)
}

/// Trains backbone, attention module and head end-to-end on keyframe labels.
pub fn fit_mtfe<T: Scalar>(
    mtfe: &mut Mtfe<T>,
    store: &FrameStore,
    labels: &BTreeMap<String, Vec<usize>>,
    videos: &[String],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut samples = Vec::new();
    for vid in videos {
        let len = store.video_len(vid)?;
        let l = labels
            .get(vid)
            .ok_or_else(|| Error::Data(format!("no annotations for video {vid}")))?;
        if l.len() != len {
            return Err(Error::Data(format!(
                "{vid}: {} labels for {len} frames",
                l.len()
            )));
        }
        samples.extend(
            (0..len)
                .step_by(cfg.sample_stride)
                .map(|k| (vid.as_str(), k, l[k])),
        );
    }
    let mut params = std::mem::take(mtfe.params_mut());
    let model = &*mtfe;
    let result = run_epochs(
        &mut params,
        &samples,
        cfg,
        "mtfe",
        |params, &(vid, k, y), scale| {
            let frames = model.sample(store, vid, k)?;
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let (_, logits) = model.forward(&mut g, &p, &frames)?;
            let loss = g.cross_entropy(logits, &[y])?;
            let hit = argmax(g.value(logits).values()) == y;
            let grads = g.backward(loss)?;
            params.accumulate(&p, &grads, scale)?;
            Ok((g.value(loss).values()[0].as_f64(), hit as usize, 1))
        },
    );
    *mtfe.params_mut() = params;
    result
}

/// Trains the temporal encoder on per-position cross-entropy over the
/// overlapping windows of each video's embedding sequence.
#[allow(clippy::too_many_arguments)]
pub fn fit_tcm<T: Scalar>(
    tcm: &mut Tcm<T>,
    embeddings: &EmbeddingStore,
    labels: &BTreeMap<String, Vec<usize>>,
    videos: &[String],
    window_length: usize,
    overlap: usize,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut streams: Vec<(Tensor<T>, &[usize])> = Vec::new();
    let mut samples = Vec::new();
    for vid in videos {
        let rows = embeddings
            .get(vid)
            .ok_or_else(|| Error::Data(format!("no embeddings for video {vid}")))?;
        let l = labels
            .get(vid)
            .ok_or_else(|| Error::Data(format!("no annotations for video {vid}")))?;
        if rows.rows() != l.len() {
            return Err(Error::Data(format!(
                "{vid}: {} embeddings for {} labelled frames",
                rows.rows(),
                l.len()
            )));
        }
        let wl = window_length.min(rows.rows());
        let schedule = schedule_windows(rows.rows(), wl, overlap.min(wl - 1))?;
        let s = streams.len();
        samples.extend(
            schedule
                .starts
                .iter()
                .step_by(cfg.sample_stride)
                .map(|&start| (s, start, wl)),
        );
        streams.push((rows.cast(), l.as_slice()));
    }
    let mut params = std::mem::take(tcm.params_mut());
    let model = &*tcm;
    let result = run_epochs(
        &mut params,
        &samples,
        cfg,
        "tcm",
        |params, &(s, start, len), scale| {
            let (rows, l) = &streams[s];
            let w = rows.cols();
            let window = Tensor::new(
                vec![len, w],
                rows.values()[start * w..(start + len) * w].to_vec(),
            )?;
            let targets = &l[start..start + len];
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let x = g.constant(window);
            let logits = model.encode_window(&mut g, &p, x)?;
            let loss = g.cross_entropy(logits, targets)?;
            let lv = g.value(logits);
            let hits = (0..len)
                .filter(|&r| argmax(lv.row(r)) == targets[r])
                .count();
            let grads = g.backward(loss)?;
            params.accumulate(&p, &grads, scale)?;
            Ok((g.value(loss).values()[0].as_f64(), hits, len))
        },
    );
    *tcm.params_mut() = params;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Tensor::<f64>::zeros(&[1, 4]);
        assert!((cross_entropy(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sat = Tensor::<f64>::from_f64(&[1, 3], &[30.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&sat, &[0]).unwrap() < 1e-9);
        assert!(cross_entropy(&sat, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_batch_mean() {
        let a = Tensor::<f64>::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 3], &[0.2, 0.3, 4.0]).unwrap();
        let both = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 0.2, 0.3, 4.0]).unwrap();
        let la = cross_entropy(&a, &[1]).unwrap();
        let lb = cross_entropy(&b, &[0]).unwrap();
        assert!((cross_entropy(&both, &[1, 0]).unwrap() - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_agrees() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 0.2, 0.3, 4.0]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = g.cross_entropy(v, &[2, 1]).unwrap();
        assert!((g.value(l).values()[0] - cross_entropy(&x, &[2, 1]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
        assert_eq!(cosine_lr(150, 100, 1e-4), cosine_lr(100, 100, 1e-4));
    }

    fn single(w: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_f64(&[1, 1], &[w]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = single(0.7);
        let mut st = OptimizerState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        p.tensors_mut()[0].accumulate_grad(&[0.0]).unwrap();
        adamw_step(&mut p, &mut st, 0.01, &cfg).unwrap();
        assert_eq!(p.tensors()[0].values()[0], 0.7 * (1.0 - 0.01 * 0.1));
    }

    #[test]
    fn first_step_is_signed_lr() {
        for g in [3.0, -0.002] {
            let mut p = single(1.0);
            let mut st = OptimizerState::new(&p);
            let cfg = TrainConfig {
                weight_decay: 0.0,
                ..TrainConfig::default()
            };
            p.tensors_mut()[0].accumulate_grad(&[g]).unwrap();
            adamw_step(&mut p, &mut st, 1e-3, &cfg).unwrap();
            let delta = p.tensors()[0].values()[0] - 1.0;
            assert!((delta + 1e-3 * f64::signum(g)).abs() < 1e-8);
        }
    }

    #[test]
    fn two_steps_on_square_match_reference() {
        let cfg = TrainConfig {
            weight_decay: 0.05,
            ..TrainConfig::default()
        };
        let lr = 0.1;
        let mut p = single(2.0);
        let mut st = OptimizerState::new(&p);

        // scalar reference written out longhand
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w = w - lr * 0.05 * w - lr * mh / (vh.sqrt() + 1e-8);

            let cur = p.tensors()[0].values()[0];
            p.tensors_mut()[0].accumulate_grad(&[2.0 * cur]).unwrap();
            adamw_step(&mut p, &mut st, lr, &cfg).unwrap();
        }
        assert!((p.tensors()[0].values()[0] - w).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p);
        p.tensors_mut()[0].accumulate_grad(&[f64::NAN]).unwrap();
        let err = adamw_step(&mut p, &mut st, 1e-3, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("w[0]"));
        assert_eq!(p.tensors()[0].values()[0], 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
