//! The staged pipeline over a working directory:
//! generate → train-mtfe → extract → train-tcm → infer → eval → ribbon.
//!
//! Every stage reads its inputs from the previous stages' directories and
//! writes its outputs plus a `manifest.json` (config snapshot, seed, SHA-256
//! of inputs and outputs) into its own directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, labels_by_video, load_annotations, write_annotations, EmbeddingStore,
    FrameStore,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_predictions, render_ribbon, write_predictions, MetricsReport};
use crate::mtfe::Mtfe;
use crate::sampler::Mode;
use crate::tcm::{PhaseTimeline, Tcm};
use crate::tensor::Tensor;
use crate::train::{fit_mtfe, fit_tcm, TrainLog};

pub const DATA_DIR: &str = "data";
pub const MTFE_DIR: &str = "mtfe";
pub const EMBED_DIR: &str = "embeddings";
pub const TCM_DIR: &str = "tcm";
pub const PRED_DIR: &str = "predictions";
pub const EVAL_DIR: &str = "eval";
pub const RIBBON_DIR: &str = "ribbon";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VideoEntry {
    id: String,
    frames: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct WindowParams {
    window_length: usize,
    overlap: usize,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of a file, or of a directory's sorted `(relative path, file hash)` list.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return sha256_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update(sha256_file(&path.join(&rel))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Owns the working directory and the configuration of one run.
pub struct Pipeline {
    root: PathBuf,
    cfg: RunConfig,
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Data(format!(
            "missing upstream artifact {}",
            path.display()
        )))
    }
}

fn store_err(path: &Path) -> impl Fn(serde_json::Error) -> Error + '_ {
    move |e| Error::Store(format!("{}: {e}", path.display()))
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            root: root.into(),
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn write_manifest(
        &self,
        stage: &str,
        dir: &Path,
        inputs: &[&str],
        outputs: &[&str],
    ) -> Result<()> {
        let hash_all = |names: &[&str]| -> Result<BTreeMap<String, String>> {
            names
                .iter()
                .map(|n| Ok((n.to_string(), content_hash(&self.root.join(n))?)))
                .collect()
        };
        let m = Manifest {
            stage: stage.into(),
            seed: self.cfg.seed,
            config: self
                .cfg
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        let cfg_path = dir.join("config.txt");
        fs::write(&cfg_path, self.cfg.to_kv_string()).map_err(|e| Error::io(&cfg_path, e))
    }

    fn videos(&self) -> Result<Vec<(String, usize)>> {
        let path = self.path("data/videos.json");
        let raw = fs::read_to_string(require(&path)?).map_err(|e| Error::io(&path, e))?;
        let v: Vec<VideoEntry> = serde_json::from_str(&raw).map_err(store_err(&path))?;
        Ok(v.into_iter().map(|e| (e.id, e.frames)).collect())
    }

    /// `(train, test)` video ids; the last `data.test_videos` are held out.
    pub fn split(&self) -> Result<(Vec<String>, Vec<String>)> {
        let ids: Vec<String> = self.videos()?.into_iter().map(|v| v.0).collect();
        if self.cfg.test_videos >= ids.len() {
            return Err(Error::config(
                "data.test_videos",
                format!("only {} videos available", ids.len()),
            ));
        }
        let cut = ids.len() - self.cfg.test_videos;
        Ok((ids[..cut].to_vec(), ids[cut..].to_vec()))
    }

    fn labels(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let path = self.path("data/annotations.csv");
        Ok(labels_by_video(&load_annotations(
            require(&path)?,
            self.cfg.num_phases,
        )?))
    }

    fn frames(&self) -> Result<FrameStore> {
        let videos = self.videos()?;
        FrameStore::load_dir(require(&self.path("data/frames"))?, &videos)
    }

    fn load_mtfe(&self) -> Result<Mtfe<f64>> {
        let mut m = Mtfe::new(self.cfg.mtfe_config()?, self.cfg.seed)?;
        m.params_mut()
            .load(require(&self.path("mtfe/model.ckpt"))?)?;
        Ok(m)
    }

    fn load_tcm(&self) -> Result<Tcm<f64>> {
        let mut m = Tcm::new(self.cfg.tcm_config(), self.cfg.seed.wrapping_add(1))?;
        m.params_mut()
            .load(require(&self.path("tcm/model.ckpt"))?)?;
        Ok(m)
    }

    pub fn generate(&self) -> Result<()> {
        let dir = self.stage_dir(DATA_DIR)?;
        let synth = generate_synthetic(&self.cfg.synthetic_spec())?;
        synth.store.write_dir(&dir.join("frames"))?;
        write_annotations(&dir.join("annotations.csv"), &synth.annotations)?;
        let entries: Vec<VideoEntry> = synth
            .store
            .video_ids()
            .map(|id| {
                Ok(VideoEntry {
                    id: id.to_string(),
                    frames: synth.store.video_len(id)?,
                })
            })
            .collect::<Result<_>>()?;
        let path = dir.join("videos.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(&entries).expect("serializes"),
        )
        .map_err(|e| Error::io(&path, e))?;
        self.write_manifest(
            "generate",
            &dir,
            &[],
            &["data/frames", "data/annotations.csv", "data/videos.json"],
        )
    }

    pub fn train_mtfe(&self) -> Result<TrainLog> {
        let store = self.frames()?;
        let labels = self.labels()?;
        let (train, _) = self.split()?;
        let mut model = Mtfe::<f64>::new(self.cfg.mtfe_config()?, self.cfg.seed)?;
        let log = fit_mtfe(&mut model, &store, &labels, &train, &self.cfg.mtfe_train())?;
        let dir = self.stage_dir(MTFE_DIR)?;
        model.params().save(&dir.join("model.ckpt"))?;
        log.write_csv(&dir.join("train_log.csv"))?;
        log.write_trace(&dir.join("loss_trace.txt"))?;
        self.write_manifest(
            "train-mtfe",
            &dir,
            &["data/frames", "data/annotations.csv"],
            &[
                "mtfe/model.ckpt",
                "mtfe/train_log.csv",
                "mtfe/loss_trace.txt",
            ],
        )?;
        Ok(log)
    }

    /// One embedding per frame of every video, plus the MTFE head's own
    /// per-frame distributions for comparison with the TCM.
    pub fn extract(&self) -> Result<()> {
        let model = self.load_mtfe()?;
        let store = self.frames()?;
        let labels = self.labels()?;
        let width = model.config().embedding_width();
        let mut out = EmbeddingStore::new(width);
        let mut heads = Vec::new();
        for (id, len) in self.videos()? {
            if labels.get(&id).map(Vec::len) != Some(len) {
                return Err(Error::Data(format!(
                    "{id}: annotations do not cover {len} frames"
                )));
            }
            let mut rows = Vec::with_capacity(len * width);
            let mut probs = Vec::with_capacity(len);
            for k in 0..len {
                let (emb, p) = model.embed(&store, &id, k)?;
                rows.extend(emb.p);
                probs.push(p);
            }
            out.push(id.clone(), Tensor::new(vec![len, width], rows)?)?;
            heads.push(PhaseTimeline {
                video_id: id,
                fps: self.cfg.fps,
                probs: Tensor::from_rows(&probs)?,
                labels: None,
            });
        }
        let dir = self.stage_dir(EMBED_DIR)?;
        out.write(&dir.join("embeddings.bin"))?;
        write_predictions(&dir.join("mtfe_predictions.jsonl"), &heads)?;
        self.write_manifest(
            "extract",
            &dir,
            &["mtfe/model.ckpt", "data/frames"],
            &[
                "embeddings/embeddings.bin",
                "embeddings/embeddings.index.json",
                "embeddings/mtfe_predictions.jsonl",
            ],
        )
    }

    fn window_params(&self, train: &[String]) -> Result<WindowParams> {
        let videos = self.videos()?;
        let lens: Vec<usize> = videos
            .iter()
            .filter(|v| train.contains(&v.0))
            .map(|v| v.1)
            .collect();
        let mean = lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64;
        let (window_length, overlap) = self.cfg.window(mean);
        Ok(WindowParams {
            window_length,
            overlap,
        })
    }

    pub fn train_tcm(&self) -> Result<TrainLog> {
        let emb = EmbeddingStore::read(require(&self.path("embeddings/embeddings.bin"))?)?;
        let labels = self.labels()?;
        let (train, _) = self.split()?;
        let w = self.window_params(&train)?;
        let mtfe_hash = content_hash(&self.path("mtfe/model.ckpt"))?;
        let mut model = Tcm::<f64>::new(self.cfg.tcm_config(), self.cfg.seed.wrapping_add(1))?;
        let log = fit_tcm(
            &mut model,
            &emb,
            &labels,
            &train,
            w.window_length,
            w.overlap,
            &self.cfg.tcm_train(),
        )?;
        if content_hash(&self.path("mtfe/model.ckpt"))? != mtfe_hash {
            return Err(Error::Store(
                "MTFE checkpoint changed during TCM training".into(),
            ));
        }
        let dir = self.stage_dir(TCM_DIR)?;
        model.params().save(&dir.join("model.ckpt"))?;
        log.write_csv(&dir.join("train_log.csv"))?;
        log.write_trace(&dir.join("loss_trace.txt"))?;
        let wp = dir.join("window.json");
        fs::write(&wp, serde_json::to_string_pretty(&w).expect("serializes"))
            .map_err(|e| Error::io(&wp, e))?;
        self.write_manifest(
            "train-tcm",
            &dir,
            &[
                "embeddings/embeddings.bin",
                "data/annotations.csv",
                "mtfe/model.ckpt",
            ],
            &[
                "tcm/model.ckpt",
                "tcm/train_log.csv",
                "tcm/loss_trace.txt",
                "tcm/window.json",
            ],
        )?;
        Ok(log)
    }

    /// TCM predictions for the held-out videos.
    pub fn infer(&self) -> Result<Vec<PhaseTimeline>> {
        let model = self.load_tcm()?;
        let emb = EmbeddingStore::read(require(&self.path("embeddings/embeddings.bin"))?)?;
        let wp = self.path("tcm/window.json");
        let raw = fs::read_to_string(require(&wp)?).map_err(|e| Error::io(&wp, e))?;
        let w: WindowParams = serde_json::from_str(&raw).map_err(store_err(&wp))?;
        let (_, test) = self.split()?;
        let mut out = Vec::new();
        for id in test {
            let rows: Tensor<f64> = emb
                .get(&id)
                .ok_or_else(|| Error::Data(format!("no embeddings for video {id}")))?
                .clone();
            let probs = match self.cfg.mode {
                Mode::Offline => model.predict_offline(&rows, w.window_length, w.overlap)?,
                Mode::Online => model.predict_online(&rows, w.window_length)?,
            };
            if !probs.is_finite() {
                return Err(Error::Numerical(format!("non-finite TCM output for {id}")));
            }
            out.push(PhaseTimeline {
                video_id: id,
                fps: self.cfg.fps,
                probs,
                labels: None,
            });
        }
        let dir = self.stage_dir(PRED_DIR)?;
        write_predictions(&dir.join("predictions.jsonl"), &out)?;
        self.write_manifest(
            "infer",
            &dir,
            &["tcm/model.ckpt", "embeddings/embeddings.bin"],
            &["predictions/predictions.jsonl"],
        )?;
        Ok(out)
    }

    fn labelled(&self, rel: &str, only: Option<&[String]>) -> Result<Vec<PhaseTimeline>> {
        let labels = self.labels()?;
        let mut tl = read_predictions(require(&self.path(rel))?, self.cfg.fps)?;
        if let Some(keep) = only {
            tl.retain(|t| keep.contains(&t.video_id));
        }
        for t in &mut tl {
            let l = labels
                .get(&t.video_id)
                .ok_or_else(|| Error::Data(format!("no annotations for video {}", t.video_id)))?;
            t.labels = Some(l.clone());
        }
        Ok(tl)
    }

    /// Metrics of the TCM predictions and, on the same videos, of the
    /// per-frame MTFE head. Returns `(tcm, mtfe)`.
    pub fn eval(&self) -> Result<(MetricsReport, MetricsReport)> {
        let tcm_tl = self.labelled("predictions/predictions.jsonl", None)?;
        let ids: Vec<String> = tcm_tl.iter().map(|t| t.video_id.clone()).collect();
        let head_tl = self.labelled("embeddings/mtfe_predictions.jsonl", Some(&ids))?;
        let tcm = evaluate(&tcm_tl)?;
        let head = evaluate(&head_tl)?;
        let dir = self.stage_dir(EVAL_DIR)?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write(
            "report.json",
            serde_json::to_string_pretty(&tcm).expect("serializes") + "\n",
        )?;
        write(
            "mtfe_report.json",
            serde_json::to_string_pretty(&head).expect("serializes") + "\n",
        )?;
        write(
            "report.txt",
            format!("TCM\n{}\nMTFE head\n{}", tcm.to_table(), head.to_table()),
        )?;
        self.write_manifest(
            "eval",
            &dir,
            &[
                "predictions/predictions.jsonl",
                "embeddings/mtfe_predictions.jsonl",
                "data/annotations.csv",
            ],
            &[
                "eval/report.json",
                "eval/mtfe_report.json",
                "eval/report.txt",
            ],
        )?;
        Ok((tcm, head))
    }

    /// Writes the ribbon SVG to `out`, or `ribbon/ribbon.svg` by default.
    pub fn ribbon(&self, out: Option<&Path>) -> Result<PathBuf> {
        let tl = self.labelled("predictions/predictions.jsonl", None)?;
        let svg = render_ribbon(&tl)?;
        let dir = self.stage_dir(RIBBON_DIR)?;
        let path = out.map_or_else(|| dir.join("ribbon.svg"), Path::to_path_buf);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// All stages in order.
    pub fn run_all(&self) -> Result<RunSummary> {
        self.generate()?;
        let mtfe_log = self.train_mtfe()?;
        self.extract()?;
        let tcm_log = self.train_tcm()?;
        self.infer()?;
        let (tcm, mtfe) = self.eval()?;
        self.ribbon(None)?;
        Ok(RunSummary {
            mtfe_log,
            tcm_log,
            tcm,
            mtfe,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub mtfe_log: TrainLog,
    pub tcm_log: TrainLog,
    pub tcm: MetricsReport,
    pub mtfe: MetricsReport,
}
