use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn qskd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qskd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let model = serde_json::json!({
        "d_model": 16, "heads": 2, "ffn_dim": 16, "backbone_hidden": 16,
        "n_enc": 1, "n_dec": 1, "n_queries": 6
    });
    let cfg = serde_json::json!({
        "data": { "train_size": 8, "eval_size": 4 },
        "model": model,
        "train": { "epochs": 2, "batch_size": 4, "eval_every": 1 },
        "teacher": { "model": model, "train": { "epochs": 1, "batch_size": 4 } },
        "grad_check": { "instances": 3 }
    });
    let p = dir.join("tiny.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let o = qskd(args);
    assert_eq!(
        code(&o),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = qskd(&["train", "--config", "/nonexistent/cfg.json", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_settings_exit_2_with_the_field_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let r = qskd(&["train", "--config", c, "--out", o, "--set", "train.lambda_agfd=-1"]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("lambda_agfd"));
    let r = qskd(&["train", "--config", c, "--out", o, "--set", "train.not_a_field=1"]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.not_a_field"));
    let r = qskd(&["bench-matching", "--out", o, "--n-q", "4", "--n-gt", "5"]);
    assert_eq!(code(&r), 2);
    let r = qskd(&["stats", "--config", c, "--out", o]);
    assert_eq!(code(&r), 2, "stats without a checkpoint");
}

#[test]
fn seed_flag_lands_in_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    run_ok(&["grad-check", "--seed", "7", "--instances", "1", "--out", out.to_str().unwrap()]);
    let eff = read_json(&out.join("effective_config.json"));
    assert_eq!(eff["train"]["seed"], 7);
    assert_eq!(eff["grad_check"]["seed"], 7);
    // Defaults are materialized.
    assert_eq!(eff["train"]["lambda_agfd"], 50.0);
    assert_eq!(eff["teacher"]["model"]["n_enc"], 3);
}

#[test]
fn train_is_deterministic_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let [a, b, r] = ["a", "b", "r"].map(|n| dir.path().join(n));
    run_ok(&["train", "--config", c, "--out", a.to_str().unwrap()]);
    run_ok(&["train", "--config", c, "--out", b.to_str().unwrap()]);
    let metrics = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(String::from_utf8(metrics(&a)).unwrap().lines().count(), 2);

    let rs = r.to_str().unwrap();
    run_ok(&["train", "--config", c, "--out", rs, "--set", "train.epochs=1"]);
    let stem = r.join("model");
    run_ok(&["train", "--config", c, "--out", rs, "--resume", stem.to_str().unwrap()]);
    assert_eq!(metrics(&a), metrics(&r));
    assert_eq!(fs::read(a.join("model.bin")).unwrap(), fs::read(r.join("model.bin")).unwrap());

    // A finished checkpoint cannot be resumed to the same epoch count.
    let again = qskd(&["train", "--config", c, "--out", rs, "--resume", stem.to_str().unwrap()]);
    assert_eq!(code(&again), 2);
}

#[test]
fn numeric_blowup_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    let o = qskd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.optimizer.lr=1e300",
        "--set",
        "train.optimizer.grad_clip=null",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    // The effective config was written before training started.
    assert!(out.join("effective_config.json").exists());
}

#[test]
fn distill_leaves_teacher_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let first = dir.path().join("first");
    run_ok(&["distill", "--config", c, "--out", first.to_str().unwrap()]);
    for f in ["teacher.json", "teacher.bin", "teacher_metrics.jsonl", "model.json", "model.bin", "metrics.jsonl"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let teacher = first.join("teacher");
    let before = fs::read(first.join("teacher.bin")).unwrap();
    let second = dir.path().join("second");
    run_ok(&[
        "distill",
        "--config",
        c,
        "--out",
        second.to_str().unwrap(),
        "--teacher",
        teacher.to_str().unwrap(),
    ]);
    assert_eq!(before, fs::read(first.join("teacher.bin")).unwrap());
    assert!(!second.join("teacher.bin").exists());
    // Same teacher, same student seed: the same trajectory.
    assert_eq!(
        fs::read(first.join("metrics.jsonl")).unwrap(),
        fs::read(second.join("metrics.jsonl")).unwrap()
    );
    let m: Vec<Value> = fs::read_to_string(second.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(m.iter().all(|r| r["loss_agfd"].as_f64().unwrap() > 0.0));
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn bench_presets_complete() {
    let dir = tempfile::tempdir().unwrap();
    for (n_q, trials) in [("300", 3usize), ("900", 2)] {
        let out = dir.path().join(n_q);
        run_ok(&[
            "bench-matching",
            "--n-q",
            n_q,
            "--trials",
            &trials.to_string(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(csv_rows(&out.join("bench.csv")).len(), trials * 2);
        let ratio = read_json(&out.join("bench.json"))["summary"]["wall_time_ratio"]
            .as_f64()
            .unwrap();
        assert!(ratio > 0.0 && ratio.is_finite());
    }
}

#[test]
fn stats_and_mask_dump_read_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let run = dir.path().join("run");
    run_ok(&["train", "--config", c, "--out", run.to_str().unwrap()]);
    let ck = run.join("model");
    let ck = ck.to_str().unwrap();
    let before = fs::read(run.join("model.bin")).unwrap();

    let stats = dir.path().join("stats");
    run_ok(&[
        "stats",
        "--config",
        c,
        "--checkpoint",
        ck,
        "--thresholds=-0.5,0,0.5,1.0",
        "--out",
        stats.to_str().unwrap(),
    ]);
    let rows = csv_rows(&stats.join("query_stats.csv"));
    assert_eq!(rows.len(), 4);
    let avg: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(avg.windows(2).all(|w| w[0] >= w[1]), "{avg:?}");
    assert_eq!(avg[3], 1.0);

    let masks = dir.path().join("masks");
    run_ok(&["mask-dump", "--config", c, "--checkpoint", ck, "--scene-index", "2", "--out", masks.to_str().unwrap()]);
    let pgms: Vec<_> = fs::read_dir(&masks)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    assert_eq!(pgms.len(), 6 + 1);
    for p in &pgms {
        let bytes = fs::read(p).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"), "{}", p.display());
        assert_eq!(bytes.len(), "P5\n8 8\n255\n".len() + 64);
    }
    let side = read_json(&masks.join("mask_dump.json"));
    let q = side["queries"].as_array().unwrap();
    assert_eq!(q.len(), 6);
    let rank = |k: &str| match k {
        "positive" => 0,
        "hard_negative" => 1,
        _ => 2,
    };
    for w in q.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (ka, kb) = (rank(a["kind"].as_str().unwrap()), rank(b["kind"].as_str().unwrap()));
        assert!(ka <= kb);
        if ka == kb {
            assert!(a["g"].as_f64().unwrap() >= b["g"].as_f64().unwrap());
        }
    }
    assert!(q.iter().any(|e| e["kind"] == "positive"));
    assert!(q.iter().filter(|e| e["kind"] == "positive").all(|e| e["g"] == 1.0));
    assert_eq!(before, fs::read(run.join("model.bin")).unwrap());
}

#[test]
fn grad_check_passes_and_catches_a_broken_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let ok = dir.path().join("ok");
    let o = run_ok(&["grad-check", "--config", c, "--out", ok.to_str().unwrap()]);
    let report = read_json(&ok.join("grad_check.json"));
    assert_eq!(report.as_array().unwrap().len(), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("max rel error"));

    let bad = dir.path().join("bad");
    let o = qskd(&["grad-check", "--config", c, "--out", bad.to_str().unwrap(), "--inject-fault", "softmax"]);
    assert_ne!(code(&o), 0);
    let report = read_json(&bad.join("grad_check.json"));
    assert!(report.as_array().unwrap().iter().any(|r| r["passed"] == false));
    let o = qskd(&["grad-check", "--out", bad.to_str().unwrap(), "--inject-fault", "nonsense"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_writes_tables_and_shares_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("abl");
    let o = run_ok(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--suite",
        "components",
        "--suite",
        "enc-threshold",
        "--seeds",
        "0",
        "--set",
        r#"ablate.cells={"components": ["none", "both"], "enc-threshold": ["tau=0.0"]}"#,
    ]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("direction"), "{text}");
    let comp = read_json(&out.join("ablate_components.json"));
    let enc = read_json(&out.join("ablate_enc-threshold.json"));
    assert_eq!(comp["summary"].as_array().unwrap().len(), 2);
    assert_eq!(comp["runs"][1]["history"], enc["runs"][0]["history"]);
    assert_eq!(csv_rows(&out.join("ablate_components.csv")).len(), 2 + 2);
    let err = qskd(&["ablate", "--out", out.to_str().unwrap(), "--suite", "nope"]);
    assert_eq!(code(&err), 2);
}
