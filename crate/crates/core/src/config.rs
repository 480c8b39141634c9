//! Flat `key = value` run configuration: defaults, file loading, overrides,
//! and resolution into the typed configs of each stage.

use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::mtfe::MtfeConfig;
use crate::sampler::{Mode, PyramidSpec};
use crate::tcm::{overlap_for, TcmConfig};
use crate::train::TrainConfig;

trait Value: Sized {
    fn parse(key: &str, s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

fn bad(key: &str, s: &str, what: &str) -> Error {
    Error::config(key, format!("expected {what}, got {s:?}"))
}

impl Value for usize {
    fn parse(key: &str, s: &str) -> Result<Self> {
        s.parse().map_err(|_| bad(key, s, "a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse(key: &str, s: &str) -> Result<Self> {
        s.parse().map_err(|_| bad(key, s, "a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for f64 {
    fn parse(key: &str, s: &str) -> Result<Self> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(key, s, "a finite number"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for Mode {
    fn parse(key: &str, s: &str) -> Result<Self> {
        s.parse().map_err(|_| bad(key, s, "offline or online"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<V: Value> Value for Option<V> {
    fn parse(key: &str, s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(None)
        } else {
            V::parse(key, s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".into(), V::render)
    }
}

impl Value for Vec<f64> {
    fn parse(key: &str, s: &str) -> Result<Self> {
        s.split(',').map(|p| f64::parse(key, p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(f64::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($key:literal => $field:ident : $ty:ty = $default:expr,)*) => {
        /// Every tunable of a pipeline run. `auto` values follow the mode.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key,)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => self.$field = <$ty as Value>::parse(key, value)?,)*
                    _ => return Err(Error::config(key, "unknown configuration key")),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, Value::render(&self.$field)),)*]
            }
        }
    };
}

run_config! {
    "mode" => mode: Mode = Mode::Offline,
    "seed" => seed: u64 = 7,
    "data.num_videos" => num_videos: usize = 20,
    "data.frames_per_video" => frames_per_video: usize = 300,
    "data.num_phases" => num_phases: usize = 4,
    "data.min_segment" => min_segment: usize = 30,
    "data.max_segment" => max_segment: usize = 90,
    "data.noise_std" => noise_std: f64 = 0.1,
    "data.frame_size" => frame_size: usize = 32,
    "data.fps" => fps: f64 = 1.0,
    "data.test_videos" => test_videos: usize = 4,
    "pyramid.strides_s" => strides_s: Vec<f64> = vec![1.0, 4.0, 8.0, 12.0],
    "pyramid.frames" => frames_per_seq: Option<usize> = None,
    "backbone.dim" => backbone_dim: usize = 64,
    "backbone.depth" => backbone_depth: usize = 2,
    "backbone.heads" => backbone_heads: usize = 4,
    "backbone.temporal_pool" => temporal_pool: usize = 2,
    "backbone.patch" => patch: usize = 8,
    "backbone.ff_mult" => backbone_ff_mult: usize = 4,
    "mtam.mlp_hidden" => mlp_hidden: Option<usize> = None,
    "mtfe.lr" => mtfe_lr: f64 = 1e-4,
    "mtfe.weight_decay" => mtfe_weight_decay: f64 = 1e-4,
    "mtfe.epochs" => mtfe_epochs: usize = 5,
    "mtfe.batch_size" => mtfe_batch_size: usize = 18,
    "mtfe.keyframe_stride" => keyframe_stride: usize = 1,
    "tcm.lr" => tcm_lr: f64 = 1e-4,
    "tcm.weight_decay" => tcm_weight_decay: f64 = 1e-4,
    "tcm.epochs" => tcm_epochs: usize = 20,
    "tcm.batch_size" => tcm_batch_size: usize = 8,
    "tcm.window_stride" => window_stride: usize = 1,
    "tcm.coverage" => coverage: Option<f64> = None,
    "tcm.overlap" => overlap_fraction: f64 = 0.9,
    "tcm.layers" => tcm_layers: usize = 2,
    "tcm.heads" => tcm_heads: usize = 4,
    "tcm.ff_mult" => tcm_ff_mult: usize = 4,
    "optim.beta1" => beta1: f64 = 0.9,
    "optim.beta2" => beta2: f64 = 0.999,
    "optim.eps" => eps: f64 = 1e-8,
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                row: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text).map_err(|e| match e {
            Error::Format { row, msg } => {
                Error::config(path.display().to_string(), format!("line {row}: {msg}"))
            }
            other => other,
        })
    }

    /// A `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "override must look like key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn to_kv_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn frames_per_seq(&self) -> usize {
        self.frames_per_seq
            .unwrap_or(self.mode.default_frames_per_seq())
    }

    pub fn coverage(&self) -> f64 {
        self.coverage.unwrap_or(self.mode.default_window_coverage())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_videos: self.num_videos,
            frames_per_video: self.frames_per_video,
            num_phases: self.num_phases,
            min_segment: self.min_segment,
            max_segment: self.max_segment,
            noise_std: self.noise_std,
            frame_size: self.frame_size,
            fps: self.fps,
            seed: self.seed,
        }
    }

    pub fn mtfe_config(&self) -> Result<MtfeConfig> {
        let t = self.frames_per_seq();
        let backbone = BackboneConfig {
            embed_dim: self.backbone_dim,
            depth: self.backbone_depth,
            heads: self.backbone_heads,
            temporal_pool: self.temporal_pool,
            patch: self.patch,
            frame_height: self.frame_size,
            frame_width: self.frame_size,
            frames_per_seq: t,
            ff_mult: self.backbone_ff_mult,
        };
        backbone.validate()?;
        Ok(MtfeConfig {
            backbone,
            pyramid: PyramidSpec::from_seconds(&self.strides_s, self.fps, t, self.mode)?,
            num_classes: self.num_phases,
            mlp_hidden: self.mlp_hidden,
        })
    }

    pub fn tcm_config(&self) -> TcmConfig {
        TcmConfig {
            width: self.strides_s.len() * self.backbone_dim,
            num_classes: self.num_phases,
            layers: self.tcm_layers,
            heads: self.tcm_heads,
            ff_mult: self.tcm_ff_mult,
            causal: self.mode == Mode::Online,
        }
    }

    /// `(F', overlap)` for videos of the given mean length.
    pub fn window(&self, mean_video_length: f64) -> (usize, usize) {
        let wl = crate::tcm::window_length_for(mean_video_length, self.coverage());
        (wl, overlap_for(wl, self.overlap_fraction))
    }

    fn train_config(
        &self,
        lr0: f64,
        weight_decay: f64,
        epochs: usize,
        batch_size: usize,
        stride: usize,
    ) -> TrainConfig {
        TrainConfig {
            lr0,
            weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            epochs,
            batch_size,
            seed: self.seed,
            mode: self.mode,
            sample_stride: stride,
        }
    }

    pub fn mtfe_train(&self) -> TrainConfig {
        self.train_config(
            self.mtfe_lr,
            self.mtfe_weight_decay,
            self.mtfe_epochs,
            self.mtfe_batch_size,
            self.keyframe_stride,
        )
    }

    pub fn tcm_train(&self) -> TrainConfig {
        self.train_config(
            self.tcm_lr,
            self.tcm_weight_decay,
            self.tcm_epochs,
            self.tcm_batch_size,
            self.window_stride,
        )
    }

    /// Checks everything that can be checked before any data exists.
    pub fn validate(&self) -> Result<()> {
        self.synthetic_spec().validate()?;
        if self.test_videos >= self.num_videos {
            return Err(Error::config(
                "data.test_videos",
                "must leave at least one training video",
            ));
        }
        self.mtfe_config()?;
        let with_key = |key: &'static str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config { msg, .. } => Error::config(key, msg),
                other => other,
            })
        };
        with_key("mtfe", self.mtfe_train().validate())?;
        with_key("tcm", self.tcm_train().validate())?;
        let tcm = self.tcm_config();
        if tcm.heads == 0 || tcm.width % tcm.heads != 0 {
            return Err(Error::config(
                "tcm.heads",
                format!("width {} not divisible", tcm.width),
            ));
        }
        let cov = self.coverage();
        if !(cov > 0.0 && cov <= 1.0) {
            return Err(Error::config("tcm.coverage", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::config("tcm.overlap", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.frames_per_seq(), 16);
        assert_eq!(c.coverage(), 0.10);
        assert_eq!(c.window(300.0), (30, 27));
    }

    #[test]
    fn mode_switch_flips_dependents() {
        let mut c = RunConfig::default();
        c.set("mode", "online").unwrap();
        assert_eq!(c.frames_per_seq(), 24);
        assert_eq!(c.coverage(), 0.05);
        assert!(c.tcm_config().causal);
        assert_eq!(c.mtfe_config().unwrap().pyramid.keyframe_slot(), 23);
    }

    #[test]
    fn unknown_key_named() {
        let mut c = RunConfig::default();
        let err = c.apply_override("tcm.depth=3").unwrap_err();
        assert!(err.to_string().contains("tcm.depth"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_value_named() {
        let mut c = RunConfig::default();
        let err = c.set("mtfe.epochs", "five").unwrap_err();
        assert!(err.to_string().contains("mtfe.epochs"));
        c.set("backbone.heads", "3").unwrap();
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("backbone.heads"));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_str(
            "# comment\nmode = online\npyramid.strides_s = 1, 2.5\ntcm.coverage=0.2 # trailing\n",
        )
        .unwrap();
        let mut d = RunConfig::default();
        d.apply_str(&c.to_kv_string()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.strides_s, vec![1.0, 2.5]);
        assert_eq!(d.coverage, Some(0.2));
        assert_eq!(RunConfig::KEYS.len(), c.entries().len());
    }
}
