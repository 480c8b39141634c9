use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.num_videos=3",
    "data.test_videos=1",
    "data.frames_per_video=40",
    "data.min_segment=10",
    "data.max_segment=20",
    "data.frame_size=16",
    "pyramid.strides_s=1,2",
    "pyramid.frames=4",
    "backbone.dim=8",
    "backbone.depth=1",
    "backbone.heads=2",
    "backbone.patch=8",
    "mtfe.epochs=1",
    "mtfe.keyframe_stride=4",
    "tcm.epochs=1",
    "tcm.heads=2",
];

fn must(workdir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_must"));
    cmd.arg("--workdir").arg(workdir).args(args);
    for kv in TINY {
        cmd.args(["--set", kv]);
    }
    cmd.env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = must(dir.path(), &["generate", "--set", "tcm.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tcm.bogus"), "{}", stderr(&out));
}

#[test]
fn bad_config_file_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "mtfe.epochs = many\n").unwrap();
    let out = must(
        dir.path(),
        &["generate", "--config", conf.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mtfe.epochs"), "{}", stderr(&out));
}

#[test]
fn missing_upstream_exits_3_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = must(dir.path(), &["train-tcm"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("embeddings"), "{}", stderr(&out));
}

#[test]
fn generate_twice_gives_identical_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(must(d.path(), &["generate", "--seed", "7"])
            .status
            .success());
    }
    let read = |d: &Path| std::fs::read(d.join("data/manifest.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn stages_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate", "train-mtfe", "extract", "train-tcm", "infer"] {
        let out = must(dir.path(), &[stage, "--mode", "online"]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let out = must(dir.path(), &["eval", "--mode", "online"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mAP"));
    assert!(dir.path().join("eval/report.json").exists());

    let out = must(
        dir.path(),
        &["ribbon", "--mode", "online", "--out", "figs/r.svg"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let svg = std::fs::read_to_string(dir.path().join("figs/r.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
}
