use std::path::Path;
use std::process::{Command, Output};

fn sparsedc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsedc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sparsedc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"
batch_size = 2
lr = 0.001
max_steps = 2
seed = 3
out_dir = "run"

[data]
kind = "manifest"
path = "data/manifest.tsv"

[model.sffm]
channels = 4

[model.branches]
pyramid_widths = [4, 4, 4, 4]
local_widths = [4, 4, 4, 4, 4]
global_widths = [4, 4, 4, 4]
global_heads = [1, 1, 1, 1]

[model.uffm]
head_width = 4

[model.refine]
hidden = 4
iterations = 2
"#;

#[test]
fn synth_simulate_train_eval_complete() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let manifest = ok(&["synth", "--count", "2", "--seed", "4", "--out", s(&data)]);
    assert_eq!(manifest.trim(), s(&data.join("manifest.tsv")));

    let gt = data.join("synthetic-000.png");
    let rgb = data.join("synthetic-000_rgb.png");
    let sparse = root.join("sparse.png");
    let preview = root.join("preview.png");
    let msg = ok(&[
        "simulate-pattern",
        "--gt",
        s(&gt),
        "--pattern",
        "keypoint:k=40,seed=1",
        "--image",
        s(&rgb),
        "--out",
        s(&sparse),
        "--preview",
        s(&preview),
    ]);
    assert!(msg.starts_with("40 valid points"), "{msg}");
    assert!(preview.exists());

    let config = root.join("train.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let trained = ok(&["train", "--config", s(&config)]);
    assert!(trained.contains("steps=2"), "{trained}");
    let ckpt = root.join("run/best.safetensors");
    assert!(ckpt.exists());
    let steps = std::fs::read_to_string(root.join("run/train_log.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 2);

    let (csv, json) = (root.join("report.csv"), root.join("report.json"));
    let manifest = data.join("manifest.tsv");
    let args = [
        "eval",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--pattern",
        "random_n:n=100,seed=7",
        "--csv",
        s(&csv),
        "--json",
        s(&json),
    ];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    assert!(first.starts_with("rmse,mae,irmse,imae,rel,delta1,delta2,delta3,n_valid"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["n_valid"].as_u64().unwrap(), 2 * 64 * 48);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);

    let out = root.join("done.png");
    let written = ok(&[
        "complete",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&rgb),
        "--sparse",
        s(&sparse),
        "--out",
        s(&out),
        "--dump-weights",
    ]);
    assert_eq!(written.lines().count(), 9);
    let depth = image::open(&out).unwrap();
    assert_eq!((depth.width(), depth.height()), (64, 48));
    assert!(root.join("done_local_s0.png").exists() && root.join("done_global_s3.png").exists());
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparsedc(&[
        "simulate-pattern",
        "--gt",
        s(&dir.path().join("gt.png")),
        "--pattern",
        "random_n:m=3",
        "--out",
        s(&dir.path().join("o.png")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("m=3") || String::from_utf8_lossy(&out.stderr).contains("`m`"));

    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "lr = -1.0\n").unwrap();
    let out = sparsedc(&["train", "--config", s(&config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr must be > 0"));
}
