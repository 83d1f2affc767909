use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pslab"))
        .args(args)
        .env_remove("PSLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in walk(dir) {
        out.push(e.strip_prefix(dir).unwrap().to_string_lossy().into_owned());
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn gen(dir: &Path, count: &str, seed: &str) {
    let o = pslab(&["gen", "--out", s(dir), "--count", count, "--seed", seed]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_writes_six_files_per_scene_and_a_manifest() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "1", "3");
    assert_eq!(
        files(&d),
        [
            "disp_left/00000.pfm",
            "disp_right/00000.pfm",
            "left/00000.png",
            "manifest.json",
            "occ_left/00000.png",
            "occ_right/00000.png",
            "right/00000.png",
            "run_manifest.json",
        ]
    );
}

#[test]
fn gen_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "2", "9");
    gen(&b, "2", "9");
    for f in files(&a).into_iter().filter(|f| f != "run_manifest.json") {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn validation_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let o = pslab(&["gen", "--out", s(&t.path().join("x")), "--count", "1", "--dmax", "30"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width/4"));

    let d = t.path().join("d");
    gen(&d, "1", "0");
    let o = pslab(&["gen", "--out", s(&d), "--count", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));

    let o = pslab(&[
        "train",
        "--data",
        s(&d),
        "--strategy",
        "q",
        "--out",
        s(&t.path().join("t")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("h = fps+wider+occ"), "{err}");

    let o = pslab(&["--threads", "0", "gen", "--out", s(&t.path().join("y")), "--count", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn render_with_zero_disparity_is_identity() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "1", "1");
    let left = pslab_core::data::read_png(d.join("left/00000.png")).unwrap();
    let zero = pslab_core::DisparityField::constant(left.width(), left.height(), 0.0).unwrap();
    let zp = t.path().join("zero.pfm");
    pslab_core::data::write_pfm(&zero, &zp).unwrap();
    let out = t.path().join("r");
    let o = pslab(&[
        "render",
        "--left",
        s(&d.join("left/00000.png")),
        "--disp",
        s(&zp),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success());
    assert_eq!(pslab_core::data::read_png(out.join("pseudo.png")).unwrap(), left);
    assert!(out.join("occ.png").exists() && out.join("holes.png").exists());
}

#[test]
fn render_of_ground_truth_matches_other_view() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "1", "4");
    let out = t.path().join("r");
    let o = pslab(&[
        "render",
        "--left",
        s(&d.join("left/00000.png")),
        "--disp",
        s(&d.join("disp_left/00000.pfm")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success());
    let pseudo = pslab_core::data::read_png(out.join("pseudo.png")).unwrap();
    let holes = pslab_core::data::read_mask_png(out.join("holes.png")).unwrap();
    let right = pslab_core::data::read_png(d.join("right/00000.png")).unwrap();
    let (mut err, mut n) = (0.0, 0);
    for y in 0..right.height() {
        for x in 0..right.width() {
            if holes.is_set(y, x) {
                err += (pseudo.get(0, y, x) - right.get(0, y, x)).abs();
                n += 1;
            }
        }
    }
    // sub-pixel disparities round to the nearest column
    assert!(err / (n as f64) < 0.05, "{}", err / n as f64);
}

#[test]
fn render_reports_missing_margin_and_bad_files() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "1", "2");
    let left = d.join("left/00000.png");
    let disp = d.join("disp_left/00000.pfm");
    let o = pslab(&[
        "render",
        "--left",
        s(&left),
        "--disp",
        s(&disp),
        "--crop-width",
        "95",
        "--out",
        s(&t.path().join("a")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("need at least"));

    let bytes = fs::read(&disp).unwrap();
    let cut = t.path().join("cut.pfm");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = pslab(&[
        "render",
        "--left",
        s(&left),
        "--disp",
        s(&cut),
        "--out",
        s(&t.path().join("b")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parse error"));
}

#[test]
fn train_zero_iterations_writes_manifest_and_initial_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "2", "0");
    let out = t.path().join("t");
    let o = pslab(&[
        "train",
        "--data",
        s(&d),
        "--strategy",
        "h",
        "--iterations",
        "0",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&out), ["ckpt_0000000.json", "run_manifest.json"]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["job"]["config"]["strategy"], "fps+wider+occ");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "1", "0");
    let o = pslab(&[
        "eval",
        "--ckpt",
        s(&t.path().join("none.json")),
        "--data",
        s(&d),
        "--out",
        s(&t.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_eval_and_replay() {
    let t = tempfile::tempdir().unwrap();
    let (train_set, held) = (t.path().join("train"), t.path().join("held"));
    gen(&train_set, "3", "0");
    gen(&held, "2", "500");
    let cfg = t.path().join("cfg.toml");
    fs::write(&cfg, "batch_size = 1\ncheckpoint_every = 5\n").unwrap();
    let out = t.path().join("t");
    let o = pslab(&[
        "train",
        "--data",
        s(&train_set),
        "--strategy",
        "c",
        "--iterations",
        "10",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "ckpt_0000005.json",
        "ckpt_0000010.json",
        "final_state.json",
        "model.json",
        "train_log.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 11);

    let ev = t.path().join("e");
    let o = pslab(&[
        "eval",
        "--ckpt",
        s(&out.join("model.json")),
        "--data",
        s(&train_set),
        "--data",
        s(&held),
        "--out",
        s(&ev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["train", "held"]);

    // a training state works as a checkpoint too
    let o = pslab(&[
        "eval",
        "--ckpt",
        s(&out.join("ckpt_0000005.json")),
        "--data",
        s(&held),
        "--out",
        s(&t.path().join("e2")),
    ]);
    assert!(o.status.success());

    let again = t.path().join("t2");
    let o = pslab(&[
        "replay",
        "--manifest",
        s(&out.join("run_manifest.json")),
        "--out",
        s(&again),
    ]);
    assert!(o.status.success());
    for f in ["train_log.csv", "model.json", "final_state.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    // resume from the midpoint reproduces the uninterrupted run
    let resumed = t.path().join("t3");
    let o = pslab(&[
        "train",
        "--data",
        s(&train_set),
        "--strategy",
        "c",
        "--iterations",
        "10",
        "--config",
        s(&cfg),
        "--resume",
        s(&out.join("ckpt_0000005.json")),
        "--out",
        s(&resumed),
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(out.join("final_state.json")).unwrap(),
        fs::read(resumed.join("final_state.json")).unwrap()
    );
}

#[test]
fn ablate_writes_one_row_per_strategy_and_seed() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "3", "0");
    let out = t.path().join("a");
    let o = pslab(&[
        "--threads",
        "1",
        "ablate",
        "--data",
        s(&d),
        "--rows",
        "a,h",
        "--seeds",
        "0,1",
        "--iterations",
        "4",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[5])).collect();
    assert_eq!(keys, [("a", "0"), ("h", "0"), ("a", "1"), ("h", "1")]);
}

#[test]
fn thread_count_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pslab"))
        .args(["gen", "--out", s(&t.path().join("d")), "--count", "2"])
        .env("PSLAB_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_pslab"))
        .args(["gen", "--out", s(&t.path().join("d")), "--count", "2"])
        .env("PSLAB_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
}
