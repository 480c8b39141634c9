//! Synthetic phase videos.
//!
//! Every video is a run of phase segments cycling through `0..num_phases`.
//! A phase's base image is a 4×4 block layout whose per-block, per-channel
//! brightness follows a row of a Sylvester-Hadamard matrix, so base images of
//! distinct phases are mutually orthogonal around mid-grey. Frames add
//! zero-mean Gaussian noise twice: once per (block, channel), which makes
//! single frames ambiguous as `noise_std` grows, and once per pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Frame, FrameStore, PhaseAnnotation};
use crate::error::{Error, Result};

const GRID: usize = 4;
const PATTERN_AMPLITUDE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub num_phases: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub noise_std: f64,
    pub frame_size: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 20,
            frames_per_video: 300,
            num_phases: 4,
            min_segment: 30,
            max_segment: 90,
            noise_std: 0.1,
            frame_size: 32,
            fps: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("data.{k}"), m));
        if self.num_videos == 0 {
            return bad("num_videos", "must be positive");
        }
        if self.num_phases == 0 || self.num_phases >= GRID * GRID * 3 {
            return bad("num_phases", "must be in [1, 47]");
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return bad("min_segment", "need 1 <= min_segment <= max_segment");
        }
        if self.max_segment > self.frames_per_video {
            return bad("max_segment", "must not exceed frames_per_video");
        }
        if self.segment_counts().is_empty() {
            return bad(
                "frames_per_video",
                "no segment count partitions the video within [min_segment, max_segment]",
            );
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be non-negative");
        }
        if self.frame_size == 0 || self.frame_size % GRID != 0 {
            return bad("frame_size", "must be a positive multiple of 4");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps", "must be positive");
        }
        Ok(())
    }

    fn segment_counts(&self) -> Vec<usize> {
        let f = self.frames_per_video;
        (f.div_ceil(self.max_segment)..=f / self.min_segment)
            .filter(|k| k * self.min_segment <= f && f <= k * self.max_segment)
            .collect()
    }

    /// Base image of a phase, values in [0, 1].
    pub fn base_pattern(&self, phase: usize) -> Vec<f64> {
        let s = self.frame_size;
        let block = s / GRID;
        let mut out = vec![0.0; s * s * 3];
        for y in 0..s {
            for x in 0..s {
                let b = (y / block) * GRID + x / block;
                for c in 0..3 {
                    out[(y * s + x) * 3 + c] =
                        0.5 + PATTERN_AMPLITUDE * hadamard(phase + 1, b * 3 + c);
                }
            }
        }
        out
    }
}

fn hadamard(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVideos {
    pub store: FrameStore,
    pub annotations: Vec<PhaseAnnotation>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn segment_lengths(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let counts = spec.segment_counts();
    let k = counts[rng.random_range(0..counts.len())];
    let mut lens = vec![spec.min_segment; k];
    let mut spare = spec.frames_per_video - k * spec.min_segment;
    while spare > 0 {
        let open: Vec<usize> = (0..k).filter(|&i| lens[i] < spec.max_segment).collect();
        let i = open[rng.random_range(0..open.len())];
        lens[i] += 1;
        spare -= 1;
    }
    lens
}

/// Generates `spec.num_videos` videos named `video_000`, `video_001`, ….
/// Bit-identical for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticVideos> {
    spec.validate()?;
    let s = spec.frame_size;
    let block = s / GRID;
    let bases: Vec<Vec<f64>> = (0..spec.num_phases).map(|p| spec.base_pattern(p)).collect();
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut annotations = Vec::with_capacity(spec.num_videos * spec.frames_per_video);

    for v in 0..spec.num_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(v as u64 + 1);
        let id = format!("video_{v:03}");
        let mut frames = Vec::with_capacity(spec.frames_per_video);
        let mut frame_idx = 0;
        for (seg, len) in segment_lengths(spec, &mut rng).into_iter().enumerate() {
            let phase = seg % spec.num_phases;
            for _ in 0..len {
                let mut block_noise = [0.0; GRID * GRID * 3];
                let mut pixels = Vec::with_capacity(s * s * 3);
                if spec.noise_std > 0.0 {
                    for n in block_noise.iter_mut() {
                        *n =
                            spec.noise_std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                    }
                }
                for y in 0..s {
                    for x in 0..s {
                        let b = (y / block) * GRID + x / block;
                        for c in 0..3 {
                            let mut val = bases[phase][(y * s + x) * 3 + c];
                            if spec.noise_std > 0.0 {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                val += block_noise[b * 3 + c] + spec.noise_std * z;
                            }
                            pixels.push(quantize(val));
                        }
                    }
                }
                frames.push(Frame::new(s, s, pixels)?);
                annotations.push(PhaseAnnotation {
                    video_id: id.clone(),
                    frame_idx,
                    phase_id: phase,
                });
                frame_idx += 1;
            }
        }
        videos.push((id, frames));
    }
    Ok(SyntheticVideos {
        store: FrameStore::from_videos(videos)?,
        annotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 3,
            frames_per_video: 120,
            num_phases: 4,
            min_segment: 10,
            max_segment: 40,
            noise_std: noise,
            frame_size: 8,
            fps: 1.0,
            seed,
        }
    }

    #[test]
    fn zero_noise_frames_equal_base() {
        let spec = small(0.0, 1);
        let out = generate_synthetic(&spec).unwrap();
        for a in &out.annotations {
            let f = out.store.frame(&a.video_id, a.frame_idx).unwrap();
            let want: Vec<u8> = spec
                .base_pattern(a.phase_id)
                .into_iter()
                .map(quantize)
                .collect();
            assert_eq!(f.pixels(), want.as_slice());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic(&small(0.2, 9)).unwrap();
        let b = generate_synthetic(&small(0.2, 9)).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.annotations, b.annotations);
        let c = generate_synthetic(&small(0.2, 10)).unwrap();
        assert_ne!(a.annotations, c.annotations);
    }

    #[test]
    fn segments_within_bounds_and_cover_every_frame() {
        for seed in 0..20 {
            let spec = small(0.1, seed);
            let out = generate_synthetic(&spec).unwrap();
            for vid in out.store.video_ids() {
                let labels: Vec<(usize, usize)> = out
                    .annotations
                    .iter()
                    .filter(|a| a.video_id == vid)
                    .map(|a| (a.frame_idx, a.phase_id))
                    .collect();
                assert_eq!(labels.len(), spec.frames_per_video);
                assert!(labels.iter().enumerate().all(|(i, &(f, _))| f == i));
                // run-length scan; consecutive segments always change phase
                let mut runs = Vec::new();
                let mut start = 0;
                for i in 1..=labels.len() {
                    if i == labels.len() || labels[i].1 != labels[start].1 {
                        runs.push(i - start);
                        start = i;
                    }
                }
                assert_eq!(runs.iter().sum::<usize>(), spec.frames_per_video);
                assert!(runs.iter().all(|&r| (10..=40).contains(&r)), "{runs:?}");
            }
        }
    }

    #[test]
    fn base_patterns_are_orthogonal() {
        let spec = small(0.0, 0);
        let a: Vec<f64> = spec.base_pattern(0).iter().map(|v| v - 0.5).collect();
        let b: Vec<f64> = spec.base_pattern(3).iter().map(|v| v - 0.5).collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn infeasible_partition_rejected() {
        let mut spec = small(0.0, 0);
        spec.frames_per_video = 10;
        spec.min_segment = 6;
        spec.max_segment = 9;
        assert!(generate_synthetic(&spec).is_err());
    }
}
