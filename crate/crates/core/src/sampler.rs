//! Temporal multi-scale pyramid: `N` sequences of `T` frame indices around a
//! keyframe, one per stride, strides strictly increasing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Frame, FrameStore};
use crate::error::{Error, Result};

/// Keyframe placement regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Keyframe in the middle slot; future frames allowed.
    Offline,
    /// Keyframe in the last slot; past frames only.
    Online,
}

impl Mode {
    /// Slot of the keyframe inside a sequence of `t` frames.
    pub fn keyframe_slot(self, t: usize) -> usize {
        match self {
            Mode::Offline => t / 2,
            Mode::Online => t - 1,
        }
    }

    pub fn default_frames_per_seq(self) -> usize {
        match self {
            Mode::Offline => 16,
            Mode::Online => 24,
        }
    }

    /// Fraction of the mean video length covered by one consistency window.
    pub fn default_window_coverage(self) -> f64 {
        match self {
            Mode::Offline => 0.10,
            Mode::Online => 0.05,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            other => Err(Error::config(
                "mode",
                format!("expected offline|online, got {other}"),
            )),
        }
    }
}

/// Default pyramid strides, in seconds.
pub const DEFAULT_STRIDES_SECONDS: [f64; 4] = [1.0, 4.0, 8.0, 12.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    strides: Vec<usize>,
    frames_per_seq: usize,
    mode: Mode,
    fps: f64,
}

impl PyramidSpec {
    /// Strides given directly in frames.
    pub fn new(strides: Vec<usize>, frames_per_seq: usize, mode: Mode) -> Result<Self> {
        Self::validated(strides, frames_per_seq, mode, 1.0)
    }

    /// Strides given in seconds, converted to frames by rounding `s · fps`
    /// to the nearest integer, at least one.
    pub fn from_seconds(
        strides_s: &[f64],
        fps: f64,
        frames_per_seq: usize,
        mode: Mode,
    ) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::config("data.fps", "must be positive"));
        }
        if strides_s.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("pyramid.strides", "strides must be positive"));
        }
        let strides = strides_s
            .iter()
            .map(|&s| ((s * fps).round() as usize).max(1))
            .collect();
        Self::validated(strides, frames_per_seq, mode, fps)
    }

    /// Four scales of 1/4/8/12 seconds; 16 frames offline, 24 online.
    pub fn default_for(mode: Mode, fps: f64) -> Result<Self> {
        Self::from_seconds(
            &DEFAULT_STRIDES_SECONDS,
            fps,
            mode.default_frames_per_seq(),
            mode,
        )
    }

    fn validated(strides: Vec<usize>, frames_per_seq: usize, mode: Mode, fps: f64) -> Result<Self> {
        if strides.is_empty() {
            return Err(Error::config("pyramid.strides", "need at least one scale"));
        }
        if strides.contains(&0) {
            return Err(Error::config("pyramid.strides", "strides must be positive"));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "pyramid.strides",
                format!("strides must be strictly increasing, got {strides:?} frames"),
            ));
        }
        if frames_per_seq == 0 {
            return Err(Error::config("pyramid.frames", "must be positive"));
        }
        Ok(Self {
            strides,
            frames_per_seq,
            mode,
            fps,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.strides.len()
    }

    pub fn frames_per_seq(&self) -> usize {
        self.frames_per_seq
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn keyframe_slot(&self) -> usize {
        self.mode.keyframe_slot(self.frames_per_seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidIndices {
    pub per_scale: Vec<Vec<usize>>,
    pub keyframe: usize,
}

/// Resolves the frame indices of every pyramid level, clamping into
/// `[0, video_length)`.
pub fn build_pyramid(
    video_length: usize,
    keyframe: usize,
    spec: &PyramidSpec,
) -> Result<PyramidIndices> {
    if keyframe >= video_length {
        return Err(Error::Bounds {
            index: keyframe,
            len: video_length,
        });
    }
    let t = spec.frames_per_seq as i64;
    let slot = spec.keyframe_slot() as i64;
    let last = video_length as i64 - 1;
    let k = keyframe as i64;
    let per_scale = spec
        .strides
        .iter()
        .map(|&s| {
            (0..t)
                .map(|pos| (k + (pos - slot) * s as i64).clamp(0, last) as usize)
                .collect()
        })
        .collect();
    Ok(PyramidIndices {
        per_scale,
        keyframe,
    })
}

/// Looks up the frames of every pyramid level, preserving order.
pub fn gather_frames<'a>(
    store: &'a FrameStore,
    video_id: &str,
    idx: &PyramidIndices,
) -> Result<Vec<Vec<&'a Frame>>> {
    idx.per_scale
        .iter()
        .map(|scale| scale.iter().map(|&i| store.frame(video_id, i)).collect())
        .collect()
}
