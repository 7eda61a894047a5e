use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motionflow::bvhio::{parse_bvh, BvhReadOptions};
use motionflow::kinematics::{forward_kinematics, Positions};

const TINY: &str = r#"
[model]
hidden = 32
layers = 1
frame_heads = 2
text_dim = 8

[data]
n_clips = 5
window = 16

[train]
batch = 2
max_steps = 3
checkpoint_every = 2

[sample]
frames = 16
steps = 4

[edit]
steps = 4
tau_min = 0.5

[retarget]
steps = 10
start_steps = [2, 4]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motionflow"));
    c.env_remove("MOTIONFLOW_RUN_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bvh_positions(path: &Path) -> Positions {
    let doc = parse_bvh(&fs::read_to_string(path).unwrap(), &BvhReadOptions::default()).unwrap();
    forward_kinematics(&doc.skeleton, &doc.clip).unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
    model: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["synth-data", "--config", s(&config), "--out-dir", s(&data), "--write-bvh"]);
    let manifest = data.join("manifest.toml");
    let train = root.join("train");
    ok(&["train", "--config", s(&config), "--data", s(&manifest), "--out-dir", s(&train)]);
    Fixture {
        model: train.join("model.ckpt"),
        _tmp: tmp,
        root,
        config,
        manifest,
    }
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let f = fixture();
    let train = f.root.join("train");
    for name in ["config.toml", "config.source.toml", "run.toml", "loss.csv", "checkpoints/step_000002.ckpt"] {
        assert!(train.join(name).is_file(), "missing {name}");
    }
    let loss = fs::read_to_string(train.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4, "{loss}");
    assert_eq!(
        fs::read_to_string(train.join("config.source.toml")).unwrap(),
        TINY,
        "config is kept verbatim"
    );

    // training twice gives identical weights and curves
    let again = f.root.join("train2");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.manifest), "--out-dir", s(&again)]);
    assert_eq!(fs::read(train.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
    assert_eq!(loss, fs::read_to_string(again.join("loss.csv")).unwrap());

    // sampling: the config is picked up from the checkpoint's run directory
    let mut outs = Vec::new();
    for name in ["s1", "s2"] {
        let dir = f.root.join(name);
        ok(&["sample", "--checkpoint", s(&f.model), "--seed", "7", "--out-dir", s(&dir)]);
        outs.push(fs::read(dir.join("sample.bvh")).unwrap());
        assert!(dir.join("features.csv").is_file());
    }
    assert_eq!(outs[0], outs[1]);
    let other = f.root.join("s3");
    ok(&["sample", "--checkpoint", s(&f.model), "--seed", "8", "--out-dir", s(&other)]);
    assert_ne!(outs[0], fs::read(other.join("sample.bvh")).unwrap());

    // edit from a dataset index, twice
    let mut edits = Vec::new();
    for name in ["e1", "e2"] {
        let dir = f.root.join(name);
        ok(&[
            "edit",
            "--checkpoint",
            s(&f.model),
            "--data",
            s(&f.manifest),
            "--index",
            "0",
            "--tgt-prompt",
            "a person does a fast squat with large motion",
            "--tgt-w-text",
            "2.5",
            "--seed",
            "3",
            "--out-dir",
            s(&dir),
        ]);
        for file in ["edit_direct.csv", "trace.csv", "features.csv"] {
            assert!(dir.join(file).is_file(), "missing {file}");
        }
        edits.push(fs::read(dir.join("edit_fk.bvh")).unwrap());
    }
    assert_eq!(edits[0], edits[1]);
    let snap = fs::read_to_string(f.root.join("e1/config.toml")).unwrap();
    assert!(snap.contains("text = 2.5"), "flag override reaches the snapshot");

    // retarget onto another clip's skeleton, twice
    let src = f.manifest.parent().unwrap().join("bvh/clip_0000.bvh");
    let tgt = f.manifest.parent().unwrap().join("bvh/clip_0001.bvh");
    let mut rets = Vec::new();
    for name in ["r1", "r2"] {
        let dir = f.root.join(name);
        ok(&[
            "retarget",
            "--checkpoint",
            s(&f.model),
            "--input",
            s(&src),
            "--target-skel",
            s(&tgt),
            "--out-dir",
            s(&dir),
        ]);
        let sweep = fs::read_to_string(dir.join("sweep.csv")).unwrap();
        assert_eq!(sweep.lines().count(), 3, "{sweep}");
        rets.push(fs::read(dir.join("retarget_fk.bvh")).unwrap());
    }
    assert_eq!(rets[0], rets[1]);
}

#[test]
fn retarget_onto_own_skeleton_is_identity() {
    let f = fixture();
    let src = f.manifest.parent().unwrap().join("bvh/clip_0002.bvh");
    let dir = f.root.join("ident");
    ok(&[
        "retarget",
        "--checkpoint",
        s(&f.model),
        "--input",
        s(&src),
        "--target-skel",
        s(&src),
        "--out-dir",
        s(&dir),
    ]);
    let a = bvh_positions(&src);
    let b = bvh_positions(&dir.join("retarget_fk.bvh"));
    assert_eq!(a.len(), b.len());
    let worst = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(p, q)| (p - q).abs().max())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-6, "max deviation {worst}");
}

#[test]
fn config_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("[model]\nhiden = 3\n", "config key `model.hiden`", "unknown field"),
        ("[train]\nlr = \"fast\"\n", "config key `train.lr`", "invalid type"),
        ("[sample]\nprompt = \"a person dances\"\n", "config key `sample.prompt`", "dances"),
        ("[model]\njoints = 24\n", "config key `model", "24"),
    ];
    for (i, (text, key, detail)) in cases.iter().enumerate() {
        let cfg = tmp.path().join(format!("bad{i}.toml"));
        fs::write(&cfg, text).unwrap();
        let out = run(&["synth-data", "--config", s(&cfg), "--out-dir", s(&tmp.path().join("x"))]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "one-line diagnostic: {err}");
        assert!(err.contains(key) && err.contains(detail), "{err}");
    }
}

#[test]
fn missing_inputs_fail_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "retarget",
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--index",
        "0",
        "--target-skel",
        "/nonexistent/t.bvh",
        "--out-dir",
        s(&out_dir),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no such file"));
    assert!(!out_dir.exists(), "no run directory for a rejected command");
}

#[test]
fn run_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = bin()
        .args(["synth-data", "--config", s(&cfg), "--seed", "4"])
        .env("MOTIONFLOW_RUN_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("synth-data-seed4");
    let run_meta = fs::read_to_string(dir.join("run.toml")).unwrap();
    assert!(run_meta.contains("seed = 4") && run_meta.contains("version = \"motionflow "));
    assert!(fs::read_to_string(dir.join("config.toml")).unwrap().contains("seed = 4"));
}

#[test]
fn convert_standardizes_to_unit_height() {
    let f = fixture();
    let src = f.manifest.parent().unwrap().join("bvh/clip_0003.bvh");
    let dir = f.root.join("conv");
    ok(&["convert", "--input", s(&src), "--out-dir", s(&dir)]);
    let doc = parse_bvh(&fs::read_to_string(dir.join("clip_0003.bvh")).unwrap(), &BvhReadOptions::default()).unwrap();
    assert!((doc.skeleton.height() - 1.0).abs() < 1e-5, "height {}", doc.skeleton.height());
}

#[test]
fn gradcheck_command_reports_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--max-elements", "3", "--out-dir", s(tmp.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().count() > 10);
}
