use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ssmkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmkit"))
        .args(args)
        .env_remove("SSMKIT_WORKERS")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK_VERIFY: [&str; 4] = ["--set", "verify.systems=2", "--set", "verify.init_seeds=3"];

const TINY_ECHO: [&str; 16] = [
    "--set",
    r#"task={"spec":{"task":"echo","seq_len":12,"lag":1},"n_train":64,"n_val":16,"n_test":32}"#,
    "--set",
    "model.core.p=4",
    "--set",
    "model.core.q=4",
    "--set",
    "model.pool=last",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.micro_batch=16",
    "--set",
    "train.log_every=1",
];

fn with_out<'a>(base: &[&'a str], extra: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend_from_slice(extra);
    v.extend_from_slice(&["--out", out]);
    v
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ssmkit(&with_out(&["verify"], &QUICK_VERIFY, out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["passed"], true);
    assert_eq!(r["entries"].as_array().unwrap().len(), 10);
}

#[test]
fn injected_modulus_exits_with_property_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ssmkit(&with_out(&["verify"], &[&QUICK_VERIFY[..], &["--set", "verify.inject_abar=1.2"]].concat(), out));
    assert_eq!(o.status.code(), Some(2));
    let r = read_json(&dir.path().join("report.json"));
    let disk = r["entries"].as_array().unwrap().iter().find(|e| e["name"] == "eigen_disk").unwrap();
    assert_eq!(disk["passed"], false);
}

#[test]
fn corrupted_backward_fails_gradient_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ssmkit(&with_out(&["verify"], &[&QUICK_VERIFY[..], &["--set", "verify.corrupt_backward=true"]].concat(), out));
    assert_eq!(o.status.code(), Some(2));
    let r = read_json(&dir.path().join("report.json"));
    let g = r["entries"].as_array().unwrap().iter().find(|e| e["name"] == "gradients").unwrap();
    assert_eq!(g["passed"], false);
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssmkit(&["init", "--set", "model.colour=3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "extra": true}"#).unwrap();
    let o = ssmkit(&["init", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn init_round_trips_through_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(ssmkit(&["init", "--set", "seed=42", "--out", out]).status.success());
    let cfg = dir.path().join("config.json");
    assert_eq!(read_json(&cfg)["seed"], 42);
    let again = dir.path().join("again");
    let o = ssmkit(&["init", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&cfg).unwrap(), std::fs::read(again.join("config.json")).unwrap());
}

#[test]
fn train_is_reproducible_and_eval_matches() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, workers) in [(&a, "1"), (&b, "2")] {
        let out = dir.path().to_str().unwrap();
        let o = ssmkit(&with_out(&["train"], &[&TINY_ECHO[..], &["--workers", workers]].concat(), out));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("test accuracy"));
    }
    let ck = |d: &tempfile::TempDir| std::fs::read(d.path().join("checkpoint.json")).unwrap();
    assert_eq!(ck(&a), ck(&b));
    let metrics = std::fs::read_to_string(a.path().join("metrics.jsonl")).unwrap();
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for k in ["epoch", "step", "loss", "accuracy", "grad_norm", "wall_s"] {
        assert!(first.get(k).is_some(), "missing {k}");
    }
    let trained = read_json(&a.path().join("report.json"));
    let eval_dir = a.path().join("eval");
    let o = ssmkit(&[
        "eval",
        "--checkpoint",
        a.path().join("checkpoint.json").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&eval_dir.join("report.json"))["test"], trained["test"]);
}

#[test]
fn zero_epoch_run_scores_near_random() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = [
        "train",
        "--set",
        r#"task={"spec":{"task":"echo","seq_len":16,"lag":3},"n_train":8,"n_val":8,"n_test":2000}"#,
        "--set",
        "train.epochs=0",
        "--out",
        out,
    ];
    assert!(ssmkit(&args).status.success());
    let acc = read_json(&dir.path().join("report.json"))["test"]["accuracy"].as_f64().unwrap();
    // 3σ band around 1/8 for 2000 samples is about ±0.022; an untrained head may still favour one class.
    assert!(acc < 0.125 + 0.15, "{acc}");
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ssmkit(&with_out(
        &["train"],
        &[&TINY_ECHO[..], &["--set", "train.adam.lr=1e300", "--set", "train.adam.clip_norm=null", "--set", "train.schedule=\"constant\""]]
            .concat(),
        out,
    ));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning rate"));
}

#[test]
fn figure_writes_one_csv_per_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(ssmkit(&["figure", "--out", out]).status.success());
    for m in ["s4", "s4d", "s5", "lru", "s6", "rglru"] {
        let text = std::fs::read_to_string(dir.path().join(format!("eig_{m}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("model,input_id,step,re,im"));
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        let moduli: Vec<f64> = rows
            .iter()
            .map(|r| r[3].parse::<f64>().unwrap().hypot(r[4].parse::<f64>().unwrap()))
            .collect();
        assert!(moduli.iter().all(|&m| m <= 1.0), "{m}");
        if m == "lru" {
            assert!(moduli.iter().all(|&r| (0.9..=0.999).contains(&r)));
        }
        if m == "s6" || m == "rglru" {
            let set = |id: &str| -> Vec<String> {
                rows.iter().filter(|r| r[1] == id).map(|r| format!("{},{}", r[3], r[4])).collect()
            };
            assert!(!set("0").is_empty());
            assert_ne!(set("0"), set("1"));
        }
    }
    assert!(dir.path().join("features.csv").exists());
}

#[test]
fn figure_output_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(ssmkit(&["figure", "--set", "seed=3", "--out", d.path().to_str().unwrap()]).status.success());
    }
    for f in ["eig_s6.csv", "eig_lru.csv", "features.csv", "report.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bench_writes_timings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ssmkit(&["bench", "--set", "bench.lengths=[256,512]", "--set", "bench.repeats=1", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let r = read_json(&dir.path().join("report.json"));
    assert!(r["scan_worker_agreement"].as_f64().unwrap() <= 1e-10);
}
