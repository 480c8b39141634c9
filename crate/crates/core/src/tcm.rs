//! Temporal consistency module: a light transformer encoder over windows of
//! consecutive multi-term embeddings, window scheduling, and the offline
//! overlap-averaging / online last-position rules that turn per-window
//! outputs into one distribution per frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, Bound, EncoderBlock, Init, LayerNorm, Linear, ParamStore};
use crate::sampler::Mode;
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, Graph, Tensor, Var};

/// Overlapping windows over a video of `video_length` frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSchedule {
    pub window_length: usize,
    pub overlap: usize,
    pub starts: Vec<usize>,
    pub video_length: usize,
}

impl WindowSchedule {
    pub fn stride(&self) -> usize {
        self.window_length - self.overlap
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Windows start at `0, s, 2s, …` with `s = F' − overlap`; when the last
/// regular window stops short of `F`, one more window is pinned to end at `F`.
pub fn schedule_windows(
    video_length: usize,
    window_length: usize,
    overlap: usize,
) -> Result<WindowSchedule> {
    if window_length == 0 || window_length > video_length {
        return Err(Error::contract(format!(
            "window length {window_length} must be in [1, {video_length}]"
        )));
    }
    if overlap >= window_length {
        return Err(Error::contract(format!(
            "overlap {overlap} must be smaller than window length {window_length}"
        )));
    }
    let stride = window_length - overlap;
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + window_length <= video_length)
        .collect();
    let last = *starts.last().expect("first window always fits");
    if last + window_length < video_length {
        starts.push(video_length - window_length);
    }
    Ok(WindowSchedule {
        window_length,
        overlap,
        starts,
        video_length,
    })
}

/// `ceil(coverage · mean_length)`, at least one frame.
pub fn window_length_for(mean_video_length: f64, coverage: f64) -> usize {
    ((coverage * mean_video_length).ceil() as usize).max(1)
}

/// `round(fraction · F')`, capped at `F' − 1`.
pub fn overlap_for(window_length: usize, fraction: f64) -> usize {
    ((fraction * window_length as f64).round() as usize).min(window_length.saturating_sub(1))
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/dim))`, `PE[pos, 2i+1] = cos(…)`.
pub fn sinusoidal_pe<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::contract(format!(
            "positional embedding width {dim} must be even"
        )));
    }
    let mut vals = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            vals.push(T::lit(angle.sin()));
            vals.push(T::lit(angle.cos()));
        }
    }
    Tensor::new(vec![len, dim], vals)
}

/// Per-frame class distributions of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTimeline {
    pub video_id: String,
    pub fps: f64,
    /// `F × classes`, rows sum to one.
    pub probs: Tensor<f64>,
    pub labels: Option<Vec<usize>>,
}

impl PhaseTimeline {
    pub fn num_frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.num_frames())
            .map(|i| {
                let row = self.probs.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Mean of the distributions of every window covering each frame.
pub fn aggregate_predictions<T: Scalar>(
    schedule: &WindowSchedule,
    window_probs: &[Tensor<T>],
) -> Result<Tensor<f64>> {
    if window_probs.len() != schedule.len() {
        return Err(Error::contract(format!(
            "{} window outputs for {} scheduled windows",
            window_probs.len(),
            schedule.len()
        )));
    }
    let c = window_probs.first().map_or(0, |w| w.cols());
    let f = schedule.video_length;
    let mut sum = vec![0.0f64; f * c];
    let mut hits = vec![0usize; f];
    for (&start, w) in schedule.starts.iter().zip(window_probs) {
        if w.rows() != schedule.window_length || w.cols() != c {
            return Err(Error::Shape {
                op: "aggregate_predictions",
                lhs: vec![schedule.window_length, c],
                rhs: w.shape().to_vec(),
            });
        }
        for r in 0..w.rows() {
            let frame = start + r;
            hits[frame] += 1;
            for (s, &v) in sum[frame * c..(frame + 1) * c].iter_mut().zip(w.row(r)) {
                *s += v.as_f64();
            }
        }
    }
    if let Some(gap) = hits.iter().position(|&h| h == 0) {
        return Err(Error::contract(format!(
            "frame {gap} is not covered by any window"
        )));
    }
    for (frame, &h) in hits.iter().enumerate() {
        let inv = 1.0 / h as f64;
        sum[frame * c..(frame + 1) * c]
            .iter_mut()
            .for_each(|v| *v *= inv);
    }
    Tensor::new(vec![f, c], sum)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcmConfig {
    /// Input embedding width, `N·D`.
    pub width: usize,
    pub num_classes: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Positions attend only to earlier positions (online regime).
    pub causal: bool,
}

impl TcmConfig {
    pub fn new(width: usize, num_classes: usize, mode: Mode) -> Self {
        Self {
            width,
            num_classes,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            causal: mode == Mode::Online,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tcm<T> {
    cfg: TcmConfig,
    params: ParamStore<T>,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl<T: Scalar> Tcm<T> {
    /// Registers parameters under `tcm.`.
    pub fn new(cfg: TcmConfig, seed: u64) -> Result<Self> {
        if cfg.width == 0 || cfg.width % 2 != 0 {
            return Err(Error::config("tcm.width", "embedding width must be even"));
        }
        if cfg.num_classes == 0 {
            return Err(Error::config("data.num_phases", "must be positive"));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let blocks = (0..cfg.layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut params,
                    &mut init,
                    &format!("tcm.block{i}"),
                    cfg.width,
                    cfg.heads,
                    cfg.ff_mult * cfg.width,
                )
            })
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut params, "tcm.norm", cfg.width);
        let head = Linear::new(
            &mut params,
            &mut init,
            "tcm.head",
            cfg.width,
            cfg.num_classes,
            true,
        );
        Ok(Self {
            cfg,
            params,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &TcmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Per-position phase logits for a window of embeddings (`L × width`).
    pub fn encode_window(&self, g: &mut Graph<T>, p: &Bound, window: Var) -> Result<Var> {
        let (len, width) = g.value(window).dims2();
        if width != self.cfg.width {
            return Err(Error::contract(format!(
                "window width {width} does not match module width {}",
                self.cfg.width
            )));
        }
        let pe = g.constant(sinusoidal_pe(len, width)?);
        let mut x = g.add(window, pe)?;
        let mask = self.cfg.causal.then(|| g.constant(causal_mask(len)));
        for b in &self.blocks {
            x = b.forward(g, p, x, mask)?;
        }
        let x = self.norm.forward(g, p, x)?;
        self.head.forward(g, p, x)
    }

    /// Softmax output for rows `start..start + len` of a video's embeddings.
    pub fn window_probs(
        &self,
        embeddings: &Tensor<T>,
        start: usize,
        len: usize,
    ) -> Result<Tensor<T>> {
        let w = embeddings.cols();
        let rows = Tensor::new(
            vec![len, w],
            embeddings.values()[start * w..(start + len) * w].to_vec(),
        )?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let v = g.constant(rows);
        let logits = self.encode_window(&mut g, &p, v)?;
        Ok(softmax_rows(g.value(logits)))
    }

    /// Overlap-averaged distributions over the whole video. Videos shorter
    /// than the window are processed as a single window.
    pub fn predict_offline(
        &self,
        embeddings: &Tensor<T>,
        window_length: usize,
        overlap: usize,
    ) -> Result<Tensor<f64>> {
        let f = embeddings.rows();
        let wl = window_length.min(f);
        let schedule = schedule_windows(f, wl, overlap.min(wl - 1))?;
        let probs = schedule
            .starts
            .iter()
            .map(|&s| self.window_probs(embeddings, s, wl))
            .collect::<Result<Vec<_>>>()?;
        aggregate_predictions(&schedule, &probs)
    }

    /// Each frame takes the last row of the window that ends on it, so no
    /// later embedding is ever consulted.
    pub fn predict_online(
        &self,
        embeddings: &Tensor<T>,
        window_length: usize,
    ) -> Result<Tensor<f64>> {
        let f = embeddings.rows();
        let c = self.cfg.num_classes;
        let mut out = Vec::with_capacity(f * c);
        for frame in 0..f {
            let start = (frame + 1).saturating_sub(window_length);
            let probs = self.window_probs(embeddings, start, frame + 1 - start)?;
            out.extend(probs.row(probs.rows() - 1).iter().map(|v| v.as_f64()));
        }
        Tensor::new(vec![f, c], out)
    }
}
