//! Frame-wise metrics (per-class AP, F1, accuracy), segment statistics,
//! prediction records and SVG phase ribbons.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tcm::PhaseTimeline;
use crate::tensor::Tensor;

/// Mean precision at the rank of each positive, ranking by descending score
/// with ties broken by original index. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positives.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut acc) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| acc / hits as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    /// Mean over classes that occur in the labels.
    pub mean: f64,
}

pub fn f1_scores(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<F1Scores> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fne = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::contract(format!(
                "class out of range for {num_classes} classes"
            )));
        }
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fne[y] += 1;
        }
    }
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| {
            let precision = if tp[c] + fp[c] > 0 {
                tp[c] as f64 / (tp[c] + fp[c]) as f64
            } else {
                0.0
            };
            let recall = if tp[c] + fne[c] > 0 {
                tp[c] as f64 / (tp[c] + fne[c]) as f64
            } else {
                0.0
            };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .collect();
    let present: Vec<usize> = (0..num_classes).filter(|&c| tp[c] + fne[c] > 0).collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|&c| per_class[c]).sum::<f64>() / present.len() as f64
    };
    Ok(F1Scores { per_class, mean })
}

/// Number of positions where the label differs from its predecessor.
pub fn transition_count(seq: &[usize]) -> usize {
    seq.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Run-length encoding as `(phase, start, length)`.
pub fn segments(seq: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &p) in seq.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == p => last.2 += 1,
            _ => out.push((p, i, 1)),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_videos: usize,
    pub num_frames: usize,
    /// `None` for classes without positive frames.
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_class_f1: Vec<f64>,
    pub mean_f1: f64,
    pub accuracy: f64,
    /// Summed over videos; boundaries between videos do not count.
    pub transition_count: usize,
    /// Mean length in seconds of predicted segments of each phase.
    pub mean_phase_duration_s: Vec<Option<f64>>,
}

/// Pools the frames of every timeline; each must carry ground-truth labels.
pub fn evaluate(timelines: &[PhaseTimeline]) -> Result<MetricsReport> {
    let c = timelines
        .first()
        .map(|t| t.num_classes())
        .ok_or_else(|| Error::Data("nothing to evaluate".into()))?;
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    let mut scores = vec![Vec::new(); c];
    let mut transitions = 0;
    let mut dur_sum = vec![0.0; c];
    let mut dur_n = vec![0usize; c];
    for t in timelines {
        let l = t
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: no ground-truth labels", t.video_id)))?;
        if t.num_classes() != c || l.len() != t.num_frames() {
            return Err(Error::Data(format!(
                "{}: timeline shape disagrees with labels",
                t.video_id
            )));
        }
        let p = t.argmax();
        transitions += transition_count(&p);
        for (phase, _, len) in segments(&p) {
            dur_sum[phase] += len as f64 / t.fps;
            dur_n[phase] += 1;
        }
        for f in 0..t.num_frames() {
            for (k, s) in scores.iter_mut().enumerate() {
                s.push(t.probs.at(f, k));
            }
        }
        preds.extend(p);
        labels.extend_from_slice(l);
    }
    let per_class_ap = (0..c)
        .map(|k| {
            let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            average_precision(&scores[k], &pos)
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let f1 = f1_scores(&preds, &labels, c)?;
    let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(MetricsReport {
        num_videos: timelines.len(),
        num_frames: labels.len(),
        per_class_ap,
        map,
        per_class_f1: f1.per_class,
        mean_f1: f1.mean,
        accuracy: correct as f64 / labels.len().max(1) as f64,
        transition_count: transitions,
        mean_phase_duration_s: (0..c)
            .map(|k| (dur_n[k] > 0).then(|| dur_sum[k] / dur_n[k] as f64))
            .collect(),
    })
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "videos {}  frames {}", self.num_videos, self.num_frames);
        let _ = writeln!(
            s,
            "{:<7}{:>9}{:>9}{:>13}",
            "phase", "AP", "F1", "mean dur s"
        );
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        for k in 0..self.per_class_f1.len() {
            let _ = writeln!(
                s,
                "{:<7}{:>9}{:>9.4}{:>13}",
                k,
                opt(self.per_class_ap[k], 4),
                self.per_class_f1[k],
                opt(self.mean_phase_duration_s[k], 1)
            );
        }
        let _ = writeln!(
            s,
            "mAP {:.4}  mean F1 {:.4}  accuracy {:.4}",
            self.map, self.mean_f1, self.accuracy
        );
        let _ = writeln!(s, "transitions {}", self.transition_count);
        s
    }
}

/// One line of `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video: String,
    pub frame: usize,
    pub probs: Vec<f64>,
    pub pred: usize,
}

pub fn write_predictions(path: &Path, timelines: &[PhaseTimeline]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in timelines {
        for (frame, pred) in t.argmax().into_iter().enumerate() {
            let rec = PredictionRecord {
                video: t.video_id.clone(),
                frame,
                probs: t.probs.row(frame).to_vec(),
                pred,
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Store(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Groups records back into timelines, in file order, without labels.
pub fn read_predictions(path: &Path, fps: f64) -> Result<Vec<PhaseTimeline>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            row: n + 1,
            msg: e.to_string(),
        })?;
        if groups.last().is_none_or(|g| g.0 != rec.video) {
            groups.push((rec.video.clone(), Vec::new()));
        }
        let g = groups.last_mut().expect("just pushed");
        if rec.frame != g.1.len() {
            return Err(Error::Format {
                row: n + 1,
                msg: format!(
                    "{}: expected frame {}, found {}",
                    rec.video,
                    g.1.len(),
                    rec.frame
                ),
            });
        }
        g.1.push(rec.probs);
    }
    groups
        .into_iter()
        .map(|(video_id, rows)| {
            Ok(PhaseTimeline {
                video_id,
                fps,
                probs: Tensor::from_rows(&rows)?,
                labels: None,
            })
        })
        .collect()
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub fn phase_color(phase: usize) -> String {
    match PALETTE.get(phase) {
        Some(c) => (*c).to_string(),
        None => format!("hsl({:.0},60%,50%)", (phase as f64 * 137.508) % 360.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RibbonRect {
    pub phase: usize,
    pub x: f64,
    pub width: f64,
}

/// One rectangle per contiguous run, scaled so the bar spans `axis_width`.
pub fn ribbon_rects(seq: &[usize], axis_width: f64) -> Vec<RibbonRect> {
    let scale = axis_width / seq.len().max(1) as f64;
    segments(seq)
        .into_iter()
        .map(|(phase, start, len)| RibbonRect {
            phase,
            x: start as f64 * scale,
            width: len as f64 * scale,
        })
        .collect()
}

const AXIS_WIDTH: f64 = 800.0;
const BAR_HEIGHT: f64 = 22.0;
const LEFT: f64 = 110.0;

/// Ground-truth and predicted bars for each labelled timeline.
pub fn render_ribbon(timelines: &[PhaseTimeline]) -> Result<String> {
    let classes = timelines.iter().map(|t| t.num_classes()).max().unwrap_or(0);
    let block = 2.0 * BAR_HEIGHT + 44.0;
    let height = 30.0 + block * timelines.len() as f64 + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        LEFT + AXIS_WIDTH + 20.0
    );
    for (i, t) in timelines.iter().enumerate() {
        let y0 = 30.0 + block * i as f64;
        let pred = t.argmax();
        let truth = t.labels.clone().unwrap_or_default();
        if !truth.is_empty() && truth.len() != pred.len() {
            return Err(Error::Data(format!(
                "{}: label count differs from frame count",
                t.video_id
            )));
        }
        let _ = writeln!(
            s,
            r#"<text x="10" y="{}" font-weight="bold">{}</text>"#,
            y0 - 8.0,
            t.video_id
        );
        for (row, (name, seq)) in [("ground truth", &truth), ("prediction", &pred)]
            .into_iter()
            .enumerate()
        {
            let y = y0 + row as f64 * (BAR_HEIGHT + 4.0);
            let _ = writeln!(
                s,
                r#"<text x="10" y="{}">{name}</text>"#,
                y + BAR_HEIGHT * 0.7
            );
            let _ = writeln!(
                s,
                r#"<g class="{}" transform="translate(0,{y})">"#,
                name.replace(' ', "-")
            );
            for r in ribbon_rects(seq, AXIS_WIDTH) {
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="0" width="{:.3}" height="{BAR_HEIGHT}" fill="{}"/>"#,
                    LEFT + r.x,
                    r.width,
                    phase_color(r.phase)
                );
            }
            let _ = writeln!(s, "</g>");
        }
        let ya = y0 + 2.0 * BAR_HEIGHT + 8.0;
        let n = pred.len();
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{ya}" x2="{}" y2="{ya}" stroke="#444"/>"##,
            LEFT + AXIS_WIDTH
        );
        for q in 0..=4 {
            let x = LEFT + AXIS_WIDTH * q as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
                ya + 14.0,
                n * q / 4
            );
        }
    }
    let yl = height - 20.0;
    for k in 0..classes {
        let x = LEFT + 90.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{yl}">phase {k}</text>"#,
            yl - 10.0,
            phase_color(k),
            x + 16.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_worked_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false])
            .unwrap()
            .unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ap_perfect_and_reversed() {
        let perfect = average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert_eq!(perfect, Some(1.0));
        let last = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap();
        assert_eq!(last, Some(0.25));
        assert_eq!(average_precision(&[0.3], &[false]).unwrap(), None);
        assert!(average_precision(&[0.3], &[]).is_err());
    }

    #[test]
    fn ap_ties_use_index_order() {
        let ap = average_precision(&[0.5, 0.5], &[false, true])
            .unwrap()
            .unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn f1_examples() {
        let f = f1_scores(&[0, 0, 0, 0], &[0, 0, 1, 1], 3).unwrap();
        assert!((f.per_class[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.per_class[1], 0.0);
        assert_eq!(f.mean, (2.0 / 3.0 + 0.0) / 2.0);
        let perfect = f1_scores(&[1, 2, 0], &[1, 2, 0], 3).unwrap();
        assert_eq!(perfect.per_class, vec![1.0; 3]);
        assert_eq!(perfect.mean, 1.0);
    }

    #[test]
    fn segment_helpers() {
        assert_eq!(transition_count(&[0, 0, 1, 1, 0]), 2);
        assert_eq!(segments(&[2, 2, 1]), vec![(2, 0, 2), (1, 2, 1)]);
        assert!(segments(&[]).is_empty());
    }

    fn timeline(probs: &[[f64; 2]], labels: Vec<usize>) -> PhaseTimeline {
        PhaseTimeline {
            video_id: "v".into(),
            fps: 2.0,
            probs: Tensor::from_rows(&probs.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .unwrap(),
            labels: Some(labels),
        }
    }

    #[test]
    fn report_on_small_timeline() {
        let t = timeline(
            &[[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.6, 0.4]],
            vec![0, 0, 1, 1],
        );
        let r = evaluate(&[t]).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.transition_count, 2);
        assert_eq!(r.mean_phase_duration_s, vec![Some(0.75), Some(0.5)]);
        assert_eq!(r.per_class_ap[1], Some(1.0));
        assert!(r.to_table().contains("mAP"));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("mAP").is_some());
    }

    #[test]
    fn report_needs_labels() {
        let mut t = timeline(&[[0.9, 0.1]], vec![0]);
        t.labels = None;
        assert!(evaluate(&[t]).is_err());
    }

    #[test]
    fn ribbon_rect_properties() {
        let rects = ribbon_rects(&[0, 0, 1, 1], 800.0);
        assert_eq!(rects.len(), 2);
        let seq = [3, 3, 1, 0, 0, 0, 2];
        let total: f64 = ribbon_rects(&seq, 800.0).iter().map(|r| r.width).sum();
        assert!((total - 800.0).abs() < 1e-9);
    }

    #[test]
    fn ribbon_identical_bars() {
        let t = timeline(&[[0.9, 0.1], [0.2, 0.8], [0.2, 0.8]], vec![0, 1, 1]);
        let svg = render_ribbon(&[t]).unwrap();
        let bars: Vec<&str> = svg
            .split("<g class=")
            .skip(1)
            .map(|b| b.split_once('>').unwrap().1.split("</g>").next().unwrap())
            .collect();
        assert_eq!(bars.len(), 2);
        assert_eq!(bars[0], bars[1]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn colors_are_stable() {
        assert_eq!(phase_color(0), phase_color(0));
        assert_ne!(phase_color(3), phase_color(4));
        assert!(phase_color(12).starts_with("hsl"));
    }

    #[test]
    fn prediction_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut a = timeline(&[[0.9, 0.1], [0.2, 0.8]], vec![0, 1]);
        a.labels = None;
        let mut b = a.clone();
        b.video_id = "w".into();
        write_predictions(&path, &[a.clone(), b.clone()]).unwrap();
        let back = read_predictions(&path, 2.0).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
