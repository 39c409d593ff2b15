use std::path::Path;
use std::process::{Command, Output};

fn zsquant(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsquant"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = zsquant(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code_and_reason(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = zsquant(dir, args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "one stderr line, got {err:?}");
    (out.status.code().unwrap(), err.trim_end().to_string())
}

/// Small trained model plus data in a fresh directory.
fn trained(dir: &Path) {
    ok(dir, &["gen-data", "--n-per-class", "40", "--out", "data"]);
    ok(dir, &["gen-model", "--out", "m0"]);
    ok(
        dir,
        &["train", "m0", "data/train", "--epochs", "3", "--out", "m1"],
    );
}

#[test]
fn full_pipeline_runs() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    trained(d);
    ok(d, &["fold-bn", "m1", "--out", "mf"]);
    ok(d, &["estimate-stats", "mf", "--out", "subs.json"]);
    let s = ok(
        d,
        &[
            "distill",
            "mf",
            "subs.json",
            "--iters",
            "20",
            "--lr",
            "0.05",
            "--out",
            "y",
        ],
    );
    assert!(s.contains("initial_loss") && s.contains("final_loss"));
    ok(
        d,
        &[
            "calibrate",
            "mf",
            "y",
            "--observer",
            "histogram",
            "--out",
            "q.json",
        ],
    );
    ok(
        d,
        &["quantize", "mf", "q.json", "--wbits", "4", "--out", "qm"],
    );
    let s = ok(d, &["eval", "qm", "data/test"]);
    let acc: f64 = s.trim().strip_prefix("top1 ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    for job in ["data", "m0", "m1", "mf", "subs.json", "y", "q.json", "qm"] {
        assert!(
            d.join(format!("{job}.job.json")).exists(),
            "{job} job missing"
        );
    }
}

#[test]
fn bn_variant_and_fold_after() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    trained(d);
    ok(
        d,
        &[
            "gen-model",
            "--kind",
            "bn-variant",
            "--from",
            "m1",
            "--data",
            "data/train",
            "--out",
            "bn",
        ],
    );
    let s = ok(d, &["fold-bn", "bn", "--out", "bnf"]);
    assert!(!s.starts_with("folded 0 "), "{s}");
    ok(
        d,
        &[
            "estimate-stats",
            "bn",
            "--fold-after",
            "--out",
            "after.json",
        ],
    );
    ok(d, &["estimate-stats", "bn", "--out", "before.json"]);
    assert_ne!(
        std::fs::read(d.join("after.json")).unwrap(),
        std::fs::read(d.join("before.json")).unwrap()
    );
    ok(
        d,
        &["distill", "bn", "before.json", "--iters", "5", "--out", "y"],
    );
}

#[test]
fn distillation_is_byte_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["gen-model", "--kind", "distill-fixture", "--out", "m"]);
    ok(d, &["estimate-stats", "m", "--out", "s.json"]);
    for out in ["a", "b"] {
        ok(
            d,
            &[
                "distill", "m", "s.json", "--iters", "25", "--seed", "3", "--out", out,
            ],
        );
    }
    let names: Vec<_> = std::fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(
            std::fs::read(d.join("a").join(&n)).unwrap(),
            std::fs::read(d.join("b").join(&n)).unwrap(),
            "{n:?} differs"
        );
    }
}

#[test]
fn identity_quantized_eval_matches_float() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    trained(d);
    ok(
        d,
        &[
            "calibrate",
            "m1",
            "data/train",
            "--abits",
            "32",
            "--out",
            "q.json",
        ],
    );
    ok(
        d,
        &["quantize", "m1", "q.json", "--wbits", "32", "--out", "qm"],
    );
    assert_eq!(
        ok(d, &["eval", "m1", "data/test"]),
        ok(d, &["eval", "qm", "data/test"])
    );
}

#[test]
fn dry_run_prints_job_without_running() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let s = ok(
        d,
        &[
            "distill",
            "m",
            "s.json",
            "--lr",
            "0.01",
            "--out",
            "y",
            "--dry-run",
        ],
    );
    let job: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(job["command"], "distill");
    assert_eq!(job["lr"], 0.01);
    assert_eq!(job["iters"], 500);
    assert_eq!(job["batch"], 8);
    assert_eq!(job["loss"], "zscore");
    assert!(!d.join("y").exists());
}

#[test]
fn emitted_job_replays() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["gen-model", "--kind", "distill-fixture", "--out", "m"]);
    ok(d, &["estimate-stats", "m", "--out", "s.json"]);
    let first = ok(
        d,
        &[
            "distill", "m", "s.json", "--iters", "15", "--loss", "l2", "--out", "y",
        ],
    );
    let replayed = ok(d, &["distill", "--config", "y.job.json"]);
    assert_eq!(first, replayed);
    // Flags win over the job file.
    let s = ok(
        d,
        &[
            "distill",
            "--config",
            "y.job.json",
            "--iters",
            "3",
            "--dry-run",
        ],
    );
    let job: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(job["iters"], 3);
    assert_eq!(job["loss"], "l2");

    let (code, reason) = code_and_reason(d, &["train", "--config", "y.job.json"]);
    assert_eq!(code, 1);
    assert!(reason.starts_with("zsquant: usage:"), "{reason}");
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert!(zsquant(d, &["--help"]).status.success());
    assert!(zsquant(d, &["--version"]).status.success());

    let (code, reason) = code_and_reason(d, &["eval", "--no-such-flag"]);
    assert_eq!(code, 1, "{reason}");
    let (code, reason) = code_and_reason(d, &["distill", "m", "s", "--loss", "l3", "--out", "y"]);
    assert_eq!(code, 1, "{reason}");

    let (code, reason) = code_and_reason(d, &["eval", "missing", "data"]);
    assert_eq!(code, 2);
    assert!(reason.starts_with("zsquant: parse-error:"), "{reason}");

    trained(d);
    let (code, reason) = code_and_reason(
        d,
        &["train", "m0", "data/train", "--lr", "1e30", "--out", "bad"],
    );
    assert_eq!(code, 3);
    assert!(reason.starts_with("zsquant: numeric-fault:"), "{reason}");
}

#[test]
fn compare_writes_report() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    trained(d);
    std::fs::write(
        d.join("grid.json"),
        r#"{"methods": ["unit-gaussian", "gzsq-distilled"], "configs": [{"weight_bits": 8, "act_bits": 8}],
            "distill": {"iterations": 10, "learning_rate": 0.05}}"#,
    )
    .unwrap();
    let table = ok(
        d,
        &[
            "compare",
            "m1",
            "data/test",
            "--grid",
            "grid.json",
            "--runs",
            "2",
            "--out",
            "r.json",
        ],
    );
    assert!(table.contains("W8A8"), "{table}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["format"], "gzsq-report/1");
}
