//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so the lines appear in order. Criteria 7
//! to 9 train the full pipeline and take several minutes on one core.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use must::backbone::BackboneConfig;
use must::config::RunConfig;
use must::data::Frame;
use must::eval::{average_precision, f1_scores};
use must::mtfe::{Mtfe, MtfeConfig};
use must::nn::{Bound, Init};
use must::pipeline::{content_hash, Pipeline, RunSummary};
use must::sampler::{build_pyramid, Mode, PyramidSpec};
use must::tcm::{aggregate_predictions, schedule_windows, Tcm, TcmConfig, WindowSchedule};
use must::tensor::{grad_check, softmax_rows, Graph, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_frames(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Frame> {
    (0..n)
        .map(|_| {
            Frame::new(
                size,
                size,
                (0..size * size * 3).map(|_| rng.random::<u8>()).collect(),
            )
            .unwrap()
        })
        .collect()
}

fn toy_mtfe(seed: u64) -> Mtfe<f64> {
    let cfg = MtfeConfig {
        backbone: BackboneConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            temporal_pool: 2,
            patch: 4,
            frame_height: 8,
            frame_width: 8,
            frames_per_seq: 4,
            ff_mult: 2,
        },
        pyramid: PyramidSpec::new(vec![1, 3], 4, Mode::Offline).unwrap(),
        num_classes: 3,
        mlp_hidden: None,
    };
    Mtfe::new(cfg, seed).unwrap()
}

// Probe point for the gradient checks: initial weights plus N(0, 0.2²)
// noise so no block sits at its near-identity initialisation. Entries with
// |g| below ~1e-6 carry a central-difference error near 2e-11 in f64, so
// the step balances truncation against that floor.
const PROBE_SEED: u64 = 10;
const PROBE_STD: f64 = 0.2;
const STEP: f64 = 3e-5;

fn perturb(tensors: &mut [Tensor<f64>], seed: u64, std: f64) {
    let mut init = Init::new(seed);
    for t in tensors {
        let noise: Tensor<f64> = init.trunc_normal(t.shape(), std);
        for (v, n) in t.values_mut().iter_mut().zip(noise.values()) {
            *v += n;
        }
    }
}

fn toy_tcm() -> (Tcm<f64>, Tensor<f64>) {
    let mut tcm = Tcm::new(
        TcmConfig {
            width: 16,
            num_classes: 3,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            causal: false,
        },
        3,
    )
    .unwrap();
    perturb(tcm.params_mut().tensors_mut(), PROBE_SEED, PROBE_STD);
    let window: Tensor<f64> = Init::new(5).trunc_normal(&[6, 16], 1.0);
    (tcm, window)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut mtfe = toy_mtfe(1);
    perturb(mtfe.params_mut().tensors_mut(), PROBE_SEED, PROBE_STD);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frames: Vec<Vec<Frame>> = (0..2).map(|_| random_frames(&mut rng, 4, 8)).collect();
    let n = mtfe.params().len();
    // fixed random readouts keep every gradient away from softmax saturation
    let fused_w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let logit_w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mtfe_err = grad_check(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let pyramid: Vec<Vec<&Frame>> = frames.iter().map(|s| s.iter().collect()).collect();
            let (fused, logits) = mtfe.forward(g, &p, &pyramid)?;
            let a = g.weighted_sum(fused, fused_w.clone())?;
            let b = g.weighted_sum(logits, logit_w.clone())?;
            g.add(a, b)
        },
        mtfe.params().tensors(),
        STEP,
    )
    .unwrap();

    let (tcm, window) = toy_tcm();
    let mut params = tcm.params().tensors().to_vec();
    params.push(window);
    let m = tcm.params().len();
    let readout: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tcm_err = grad_check(
        |g, vars| {
            let p = Bound::from_vars(vars[..m].to_vec());
            let logits = tcm.encode_window(g, &p, vars[m])?;
            g.weighted_sum(logits, readout.clone())
        },
        &params,
        STEP,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mtfe_err < 1e-5 && tcm_err < 1e-5 && secs < 60.0,
        format!(
            "max rel err MTFE {mtfe_err:.2e} ({n} tensors), TCM {tcm_err:.2e} (incl. input window); {secs:.1} s"
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut negative = false;
    let mut inspect = |g: &Graph<f64>| {
        for m in g.probed_softmaxes() {
            for r in 0..m.rows() {
                let s: f64 = m.row(r).iter().sum();
                negative |= m.row(r).iter().any(|&v| v < 0.0);
                worst = worst.max((s - 1.0).abs());
                checked += 1;
            }
        }
    };

    let mtfe = toy_mtfe(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let frames: Vec<Vec<Frame>> = (0..2).map(|_| random_frames(&mut rng, 4, 8)).collect();
    let pyramid: Vec<Vec<&Frame>> = frames.iter().map(|s| s.iter().collect()).collect();
    let mut g = Graph::new();
    g.enable_softmax_probe();
    let p = mtfe.params().bind_frozen(&mut g);
    mtfe.forward(&mut g, &p, &pyramid).unwrap();
    let mtfe_mats = g.probed_softmaxes().len();
    inspect(&g);

    let (tcm, window) = toy_tcm();
    let mut g = Graph::new();
    g.enable_softmax_probe();
    let p = tcm.params().bind_frozen(&mut g);
    let w = g.constant(window);
    tcm.encode_window(&mut g, &p, w).unwrap();
    let tcm_mats = g.probed_softmaxes().len();
    inspect(&g);

    outcome(
        mtfe_mats > 0 && tcm_mats > 0 && worst <= 1e-12 && !negative,
        format!(
            "{mtfe_mats}+{tcm_mats} attention matrices, {checked} rows, max |sum-1| {worst:.1e}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    let cases = 10_000;
    for _ in 0..cases {
        let len = rng.random_range(1..=400usize);
        let k = rng.random_range(0..len);
        let t = rng.random_range(1..=32usize);
        let mode = if rng.random::<bool>() {
            Mode::Offline
        } else {
            Mode::Online
        };
        let scales = rng.random_range(1..=4usize);
        let mut strides = Vec::new();
        let mut s = 0;
        for _ in 0..scales {
            s += rng.random_range(1..=12usize);
            strides.push(s);
        }
        let spec = PyramidSpec::new(strides.clone(), t, mode).unwrap();
        let idx = build_pyramid(len, k, &spec).unwrap();
        let slot = match mode {
            Mode::Offline => t / 2,
            Mode::Online => t - 1,
        };
        let mut ok = idx.per_scale.len() == scales;
        for (seq, &s) in idx.per_scale.iter().zip(&strides) {
            ok &= seq.len() == t && seq[slot] == k;
            for (j, &i) in seq.iter().enumerate() {
                let want = k as i64 + (j as i64 - slot as i64) * s as i64;
                ok &= i as i64 == want.clamp(0, len as i64 - 1);
                if mode == Mode::Online {
                    ok &= i <= k;
                }
            }
            ok &= seq.windows(2).all(|w| w[0] <= w[1]);
        }
        failures += usize::from(!ok);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 5.0,
        format!("{} / {cases} cases hold; {secs:.2} s", cases - failures),
    )
}

fn covers_all(s: &WindowSchedule) -> bool {
    let mut hit = vec![false; s.video_length];
    for &st in &s.starts {
        hit[st..st + s.window_length]
            .iter_mut()
            .for_each(|h| *h = true);
    }
    hit.iter().all(|&h| h)
}

fn criterion_4() -> Outcome {
    let worked = schedule_windows(100, 20, 18).unwrap().len();
    let (mut divisible, mut formula_ok, mut all, mut covered) = (0, 0, 0, 0);
    for f in 1..=60 {
        for fp in 1..=f {
            for ov in 0..fp {
                let s = schedule_windows(f, fp, ov).unwrap();
                all += 1;
                covered += usize::from(
                    covers_all(&s)
                        && s.starts
                            .windows(2)
                            .take(s.len().saturating_sub(2))
                            .all(|w| w[1] - w[0] == fp - ov),
                );
                if (f - fp) % (fp - ov) == 0 {
                    divisible += 1;
                    formula_ok += usize::from(s.len() == 1 + (f - fp) / (fp - ov));
                }
            }
        }
    }
    outcome(
        worked == 41 && formula_ok == divisible && covered == all,
        format!("worked case {worked} windows; formula {formula_ok}/{divisible}; coverage and stride {covered}/{all}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let f = rng.random_range(1..=300usize);
        let fp = rng.random_range(1..=f);
        let ov = rng.random_range(0..fp);
        let c = rng.random_range(2..=6usize);
        let s = schedule_windows(f, fp, ov).unwrap();
        let blocks: Vec<Tensor<f64>> = s
            .starts
            .iter()
            .map(|_| {
                let logits = Tensor::new(
                    vec![fp, c],
                    (0..fp * c).map(|_| rng.random_range(-4.0..4.0)).collect(),
                )
                .unwrap();
                softmax_rows(&logits)
            })
            .collect();
        let got = aggregate_predictions(&s, &blocks).unwrap();
        for frame in 0..f {
            let mut acc = vec![0.0; c];
            let mut n = 0;
            for (w, &st) in s.starts.iter().enumerate() {
                if st <= frame && frame < st + fp {
                    n += 1;
                    for k in 0..c {
                        acc[k] += blocks[w].at(frame - st, k);
                    }
                }
            }
            for k in 0..c {
                worst = worst.max((acc[k] / n as f64 - got.at(frame, k)).abs());
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("100 random schedules, max deviation {worst:.1e}"),
    )
}

/// Exact AP as a rational over the lcm of 1..=20, from a rank walk that
/// derives each item's rank by counting the items that beat it.
fn ap_oracle(scores: &[f64], pos: &[bool]) -> Option<f64> {
    const L: u128 = 232_792_560;
    let n = scores.len();
    let beats = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut num: u128 = 0;
    let mut npos = 0u128;
    for i in (0..n).filter(|&i| pos[i]) {
        npos += 1;
        let rank = 1 + (0..n).filter(|&j| beats(j, i)).count() as u128;
        let hits = 1 + (0..n).filter(|&j| pos[j] && beats(j, i)).count() as u128;
        num += hits * (L / rank);
    }
    (npos > 0).then(|| num as f64 / (L * npos) as f64)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut agree = 0;
    for _ in 0..1000 {
        // a coarse score grid makes ties common
        let scores: Vec<f64> = (0..20)
            .map(|_| rng.random_range(0..8) as f64 / 8.0)
            .collect();
        let pos: Vec<bool> = (0..20).map(|_| rng.random_bool(0.3)).collect();
        let got = average_precision(&scores, &pos).unwrap();
        let want = ap_oracle(&scores, &pos);
        match (got, want) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                agree += usize::from((a - b).abs() <= 4.0 * f64::EPSILON);
            }
            (None, None) => agree += 1,
            _ => {}
        }
    }
    let worked = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false])
        .unwrap()
        .unwrap();
    let f1 = f1_scores(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
    outcome(
        agree == 1000 && (worked - 0.8333).abs() < 1e-4 && (worked - 5.0 / 6.0).abs() < 1e-9 && f1.mean == 1.0 / 3.0,
        format!(
            "rank-walk oracle {agree}/1000 (max diff {worst:.1e}); worked AP {worked:.10}; F1 mean {} (1/3 exact: {})",
            f1.mean,
            f1.mean == 1.0 / 3.0
        ),
    )
}

fn preset(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    let mut cfg = RunConfig::default();
    cfg.apply_file(&path).unwrap();
    cfg
}

fn end_to_end() -> (RunSummary, Duration, BTreeMap<&'static str, String>) {
    let cfg = preset("acceptance.conf");
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let p = Pipeline::new(dir.path(), cfg).unwrap();
    let summary = p.run_all().unwrap();
    let elapsed = start.elapsed();
    let hashes = [
        "mtfe/model.ckpt",
        "embeddings/embeddings.bin",
        "tcm/model.ckpt",
        "predictions/predictions.jsonl",
        "eval/report.json",
    ]
    .into_iter()
    .map(|rel| (rel, content_hash(&dir.path().join(rel)).unwrap()))
    .collect();
    (summary, elapsed, hashes)
}

fn criterion_7(run: &(RunSummary, Duration, BTreeMap<&'static str, String>)) -> Outcome {
    let (s, t, _) = run;
    let secs = t.as_secs_f64();
    outcome(
        s.mtfe_log.epochs.len() <= 5
            && s.tcm_log.epochs.len() <= 20
            && s.tcm.num_videos == 4
            && s.tcm.accuracy >= 0.90
            && s.tcm.map >= 0.90
            && secs < 900.0,
        format!(
            "held-out {} videos: accuracy {:.4}, mAP {:.4}, mean F1 {:.4}; MTFE {} epochs, TCM {} epochs; {secs:.0} s",
            s.tcm.num_videos,
            s.tcm.accuracy,
            s.tcm.map,
            s.tcm.mean_f1,
            s.mtfe_log.epochs.len(),
            s.tcm_log.epochs.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let base = preset("consistency.conf");
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=10u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let dir = tempfile::tempdir().unwrap();
        let s = Pipeline::new(dir.path(), cfg).unwrap().run_all().unwrap();
        wins += usize::from(s.tcm.transition_count < s.mtfe.transition_count);
        pairs.push(format!(
            "{}<{}",
            s.tcm.transition_count, s.mtfe.transition_count
        ));
    }
    outcome(
        wins >= 8,
        format!(
            "TCM fewer transitions in {wins}/10 seeds (TCM<MTFE: {})",
            pairs.join(" ")
        ),
    )
}

fn criterion_9(first: &(RunSummary, Duration, BTreeMap<&'static str, String>)) -> Outcome {
    let second = end_to_end();
    let (a, b) = (&first.0, &second.0);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let losses = bits(&a.mtfe_log.step_losses) == bits(&b.mtfe_log.step_losses)
        && bits(&a.tcm_log.step_losses) == bits(&b.tcm_log.step_losses);
    let metrics = serde_json::to_string(&a.tcm).unwrap() == serde_json::to_string(&b.tcm).unwrap()
        && a.tcm.map.to_bits() == b.tcm.map.to_bits()
        && a.tcm.accuracy.to_bits() == b.tcm.accuracy.to_bits();
    let artifacts = first.2 == second.2;
    outcome(
        losses && metrics && artifacts,
        format!(
            "{} + {} step losses identical: {losses}; metrics identical: {metrics}; artifact hashes identical: {artifacts}",
            a.mtfe_log.step_losses.len(),
            a.tcm_log.step_losses.len()
        ),
    )
}

fn report(n: usize, title: &str, o: Outcome) -> bool {
    println!(
        "criterion {n} [{}] {title}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn main() -> ExitCode {
    // numeric arguments select criteria, e.g. `cargo test --test acceptance -- 4 5`
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let picked: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut ok = true;
    if want(1) {
        ok &= report(1, "gradient fidelity", criterion_1());
    }
    if want(2) {
        ok &= report(2, "attention stochasticity", criterion_2());
    }
    if want(3) {
        ok &= report(3, "sampler exactness", criterion_3());
    }
    if want(4) {
        ok &= report(4, "window formula", criterion_4());
    }
    if want(5) {
        ok &= report(5, "aggregation oracle", criterion_5());
    }
    if want(6) {
        ok &= report(6, "metric oracles", criterion_6());
    }
    let run = (want(7) || want(9)).then(end_to_end);
    if let (true, Some(run)) = (want(7), &run) {
        ok &= report(7, "end-to-end synthetic run", criterion_7(run));
    }
    if want(8) {
        ok &= report(8, "consistency direction", criterion_8());
    }
    if let (true, Some(run)) = (want(9), &run) {
        ok &= report(9, "determinism", criterion_9(run));
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
