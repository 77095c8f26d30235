use std::path::Path;
use std::process::{Command, Output};

use portrait_core::config::RunConfig;

fn portrait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_portrait")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.corpus.clips = 2;
    cfg.corpus.identities = 1;
    cfg.corpus.frames = 17;
    cfg.train.steps = 2;
    cfg.train.batch = 1;
    cfg.sample.steps = 2;
    cfg.paths.corpus = dir.join("corpus");
    cfg.paths.out = dir.join("runs");
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn cost_preset_prints_ratio() {
    let o = portrait(&["cost", "--preset", "ltx", "--dims", "121x512x768"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("tokens=6144"));
    assert!(text.contains("cost_ratio=7.5625"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(portrait(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(portrait(&["cost", "--dims", "12x12"]).status.code(), Some(1));
    assert_eq!(portrait(&["cost", "--preset", "sd"]).status.code(), Some(1));
    assert_eq!(portrait(&["train", "--stage", "legs"]).status.code(), Some(1));
    assert_eq!(portrait(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "seed = 1\n[backbone]\nwidth = 30\n").unwrap();
    let o = portrait(&["--config", p.to_str().unwrap(), "cost"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes() {
    let o = portrait(&["verify"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(!text.contains("[FAIL]"));
    assert!(text.contains("[PASS]"));
}

#[test]
fn train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let d = dir.path();

    // no corpus yet
    assert_eq!(portrait(&["--config", &cfg, "train", "--stage", "face"]).status.code(), Some(1));

    let o = portrait(&["--config", &cfg, "synth-data", "--stage", "face"]);
    assert!(o.status.success(), "{o:?}");
    assert!(d.join("corpus/face/manifest.txt").exists());

    let o = portrait(&["--config", &cfg, "train", "--stage", "face"]);
    assert!(o.status.success(), "{o:?}");
    let log = std::fs::read_to_string(d.join("runs/face_loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let o = portrait(&["--config", &cfg, "train", "--stage", "face", "--resume", "--steps", "3"]);
    assert!(o.status.success(), "{o:?}");
    let log = std::fs::read_to_string(d.join("runs/face_loss.log")).unwrap();
    assert_eq!(log.lines().map(|l| l.split(' ').next().unwrap()).collect::<Vec<_>>(), ["1", "2", "3"]);

    let clip = d.join("corpus/face/clip_00000");
    let out = d.join("sample");
    let o = portrait(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "sample",
        "--checkpoint",
        d.join("runs/face.ck").to_str().unwrap(),
        "--reference",
        d.join("ref.vid").to_str().unwrap(),
        "--audio",
        clip.with_extension("aud").to_str().unwrap(),
    ]);
    // reference file does not exist yet
    assert_eq!(o.status.code(), Some(1));

    let video = portrait_core::io::read_clip(&clip.with_extension("vid")).unwrap();
    portrait_core::io::write_clip(&d.join("ref.vid"), &video.slice_frames(0, 1)).unwrap();
    let o = portrait(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "sample",
        "--checkpoint",
        d.join("runs/face.ck").to_str().unwrap(),
        "--reference",
        d.join("ref.vid").to_str().unwrap(),
        "--audio",
        clip.with_extension("aud").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let back = portrait_core::io::read_clip(&out.join("video.vid")).unwrap();
    assert_eq!((back.t, back.h, back.w), (17, 64, 64));
    assert!(out.join("frames/frame_0016.png").exists());
}

#[test]
fn halfbody_requires_face_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(portrait(&["--config", &cfg, "synth-data", "--stage", "halfbody"]).status.success());
    let o = portrait(&["--config", &cfg, "train", "--stage", "halfbody"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("face"));
    let o = portrait(&["--config", &cfg, "train", "--stage", "halfbody", "--from-scratch"]);
    assert!(o.status.success(), "{o:?}");
}
