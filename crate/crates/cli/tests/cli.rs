//! End-to-end runs of every subcommand against generated fixtures.

use std::path::Path;
use std::process::{Command, Output};

fn mproto(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mproto"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mproto(dir, args);
    assert!(
        out.status.success(),
        "mproto {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) {
    std::fs::write(
        dir.join("run.json"),
        r#"{
  "n": 3, "levels": 3, "width": 8, "seed": 7, "steps": 60, "episodes": 4,
  "synthetic": {"grid": 16, "classes": 4, "dim": 8, "scale": 3.0, "noise": 0.1,
                "train_scenes": 3, "seed": 11}
}"#,
    )
    .unwrap();
}

#[test]
fn full_pipeline_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir);

    ok(
        dir,
        &[
            "gen-scene",
            "--config",
            "run.json",
            "--out-dir",
            "support",
            "--scene-seed",
            "1",
        ],
    );
    ok(
        dir,
        &[
            "gen-scene",
            "--config",
            "run.json",
            "--out-dir",
            "query",
            "--scene-seed",
            "2",
        ],
    );

    let split = ok(
        dir,
        &[
            "split-mask",
            "--mask",
            "support/mask_1.pgm",
            "--n",
            "3",
            "--seed",
            "4",
            "--out-dir",
            "parts",
        ],
    );
    assert!(split.contains("algorithm=m-splitting"));
    assert!(dir.join("parts/part_2.pgm").exists());

    for level in ["1", "2", "3"] {
        ok(
            dir,
            &[
                "extract",
                "--scene-dir",
                "support",
                "--level",
                level,
                "--classes",
                "1,2,3,4",
                "--n",
                "3",
                "--seed",
                "5",
                "--out",
                &format!("bank{level}.json"),
            ],
        );
        ok(
            dir,
            &[
                "fuse",
                "--scene-dir",
                "support",
                "--level",
                level,
                "--bank",
                &format!("bank{level}.json"),
                "--out",
                &format!("fused{level}.json"),
            ],
        );
    }
    let predict = ok(
        dir,
        &[
            "predict",
            "--scene-dir",
            "query",
            "--banks",
            "fused1.json,fused2.json,fused3.json",
            "--out-dir",
            "pred",
        ],
    );
    assert!(predict.contains("5 class masks"));
    assert!(dir.join("pred/pred_0.pgm").exists());
    assert!(dir.join("pred/probs.mpf").exists());

    ok(dir, &["train", "--config", "run.json", "--out", "ckpt"]);
    assert!(dir.join("ckpt/manifest.json").exists());
    let log = std::fs::read_to_string(dir.join("ckpt/loss.log")).unwrap();
    assert_eq!(log.lines().count(), 60);
    assert!(log.starts_with("step=1 loss="));

    let gfs = ok(
        dir,
        &[
            "eval-gfs", "--config", "run.json", "--ckpt", "ckpt", "--report", "gfs.json",
        ],
    );
    assert!(gfs.contains("hiou="));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("gfs.json")).unwrap()).unwrap();
    assert!(report["hiou"].as_f64().unwrap() > 0.0);

    let zfs = ok(dir, &["eval-zfs", "--config", "run.json", "--ckpt", "ckpt"]);
    assert!(zfs.contains("mean_iou="));

    let gc = ok(dir, &["grad-check", "--instances", "3", "--seed", "2"]);
    assert!(gc.contains("gradient check passed"));
}

#[test]
fn seeded_commands_are_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir);

    for run in ["a", "b"] {
        ok(
            dir,
            &[
                "gen-scene",
                "--config",
                "run.json",
                "--out-dir",
                &format!("scene_{run}"),
                "--scene-seed",
                "9",
            ],
        );
    }
    for file in ["features_l1.mpf", "gt.pgm", "mask_2.pgm", "emb_1_name.mpf"] {
        let a = std::fs::read(dir.join("scene_a").join(file)).unwrap();
        let b = std::fs::read(dir.join("scene_b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs across identically seeded runs");
    }

    for run in ["pa", "pb"] {
        ok(
            dir,
            &[
                "split-mask",
                "--mask",
                "scene_a/mask_1.pgm",
                "--n",
                "4",
                "--seed",
                "33",
                "--out-dir",
                &format!("parts_{run}"),
            ],
        );
    }
    for k in 0..4 {
        let a = std::fs::read(dir.join("parts_pa").join(format!("part_{k}.pgm"))).unwrap();
        let b = std::fs::read(dir.join("parts_pb").join(format!("part_{k}.pgm"))).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.json"), r#"{"n": 3, "lamda": 0.01}"#).unwrap();
    let out = mproto(dir, &["train", "--config", "bad.json", "--out", "ckpt"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("lamda"),
        "error should name the bad key: {stderr}"
    );
}

#[test]
fn bench_split_reports_speedup() {
    let tmp = tempfile::tempdir().unwrap();
    // desk-scale mask so the test stays fast; the acceptance suite measures
    // the full 473x473 case
    let out = ok(
        tmp.path(),
        &[
            "bench-split",
            "--height",
            "96",
            "--width",
            "96",
            "--n",
            "4",
            "--runs",
            "5",
            "--seed",
            "3",
        ],
    );
    assert!(out.contains("m-splitting"));
    assert!(out.contains("speedup_vs_kmeans3="));
}
