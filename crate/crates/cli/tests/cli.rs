use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_DATA: &[&str] = &[
    "--set",
    "data.height=32",
    "--set",
    "data.width=32",
    "--set",
    "data.frames_per_clip=3",
    "--set",
    "data.train_clips=2",
    "--set",
    "data.val_clips=2",
    "--set",
    "data.noise_patches=4",
];

const TINY_MODEL: &[&str] = &[
    "--set",
    "model.channels=4",
    "--set",
    "model.res_blocks=1",
    "--set",
    "model.dca_blocks=1",
    "--set",
    "optim.batch_size=1",
    "--set",
    "optim.crop_size=16",
    "--set",
    "optim.learning_rate=0.001",
];

fn vinpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vinpaint"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().expect("summary line")).unwrap()
}

fn synth(dir: &Path) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL_DATA);
    assert_eq!(ok(&vinpaint(&args))["clips"], 4);
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_snapshots_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let snapshot = std::fs::read_to_string(a.join("config.resolved.toml")).unwrap();
    assert!(snapshot.contains("height = 32"), "{snapshot}");
    assert!(a.join("manifest.jsonl").exists());
}

#[test]
fn oracle_inference_evaluates_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let results = tmp.path().join("results");
    let report = tmp.path().join("eval/report.jsonl");
    synth(&data);
    let out = vinpaint(&[
        "infer",
        "--oracle",
        "--data",
        data.to_str().unwrap(),
        "--out",
        results.to_str().unwrap(),
    ]);
    assert_eq!(ok(&out)["clips"], 2);
    let out = vinpaint(&[
        "eval",
        "--results",
        results.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    let summary = ok(&out);
    assert_eq!(summary["psnr"], 99.0);
    assert_eq!(summary["iou"], 1.0);
    assert!((summary["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let lines = std::fs::read_to_string(&report).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert!(report.with_extension("txt").exists());
}

#[test]
fn train_resume_and_infer_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let train = |out: &Path, steps: &str, resume: bool| {
        let set = format!("optim.total_steps={steps}");
        let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(TINY_MODEL);
        args.extend_from_slice(&["--set", &set]);
        if resume {
            args.push("--resume");
        }
        ok(&vinpaint(&args))
    };
    let full = tmp.path().join("full");
    let split = tmp.path().join("split");
    assert_eq!(train(&full, "4", false)["steps"], 4);
    train(&split, "2", false);
    assert_eq!(train(&split, "4", true)["steps"], 4);
    let log = |d: &Path| std::fs::read_to_string(d.join("train_log.jsonl")).unwrap();
    assert_eq!(log(&full).lines().count(), 4);
    assert_eq!(log(&full), log(&split));
    assert_eq!(
        std::fs::read(full.join("checkpoint.safetensors")).unwrap(),
        std::fs::read(split.join("checkpoint.safetensors")).unwrap()
    );

    // Single-clip mode: frames and annotation directories.
    let clip = data.join("val/val-0000/frames");
    let ann = tmp.path().join("ann");
    std::fs::create_dir_all(&ann).unwrap();
    std::fs::copy(data.join("val/val-0000/masks/00000.png"), ann.join("00000.png")).unwrap();
    let out = tmp.path().join("single");
    let ckpt = full.join("checkpoint.safetensors");
    let mut args = vec![
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--clip",
        clip.to_str().unwrap(),
        "--annotations",
        ann.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY_MODEL);
    assert_eq!(ok(&vinpaint(&args))["frames"], 3);
    for kind in ["completed", "masks", "soft_masks"] {
        assert!(out.join(kind).join("00002.png").exists());
    }
    let record: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(record["provenance"][0], "annotated");
    assert_eq!(record["provenance"][1], "predicted");
}

#[test]
fn unknown_keys_fail_with_one_json_line() {
    let out = vinpaint(&[
        "synth",
        "--out",
        "/nonexistent/never",
        "--set",
        "model.chanels=3",
        "--set",
        "bogus=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    let err: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["kind"], "config");
    let msg = err["error"].as_str().unwrap();
    assert!(msg.contains("model.chanels") && msg.contains("bogus"), "{msg}");
}

#[test]
fn missing_inputs_are_reported_with_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vinpaint(&[
        "train",
        "--data",
        "/nonexistent/data",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("/nonexistent/data"));

    let out = vinpaint(&[
        "serve",
        "--checkpoint",
        "/nonexistent/ckpt.safetensors",
        "--work-dir",
        tmp.path().join("w").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
