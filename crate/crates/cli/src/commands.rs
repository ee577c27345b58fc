//! One function per subcommand. Each writes its files under `out` and
//! returns the report that was written to `report.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ssmkit::bench::{loglog_slope, lookup, run_bench, scan_worker_agreement, write_csv};
use ssmkit::exec::ExecMode;
use ssmkit::init::{eig_scatter, write_eig_csv};
use ssmkit::learn::train::{evaluate, train, EvalResult};
use ssmkit::learn::ParamStore;
use ssmkit::models::{CoreConfig, CoreModel, ModelKind};
use ssmkit::scaffold::LayerStack;
use ssmkit::system::Sequence;
use ssmkit::rng;

use crate::config::RunConfig;
use crate::verify;
use crate::CliError;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    writeln!(f)?;
    Ok(())
}

fn prepare(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

pub fn cmd_init(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    prepare(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let report = json!({ "command": "init", "config": "config.json" });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

pub fn cmd_verify(cfg: &RunConfig, out: &Path, workers: usize) -> Result<Value, CliError> {
    prepare(out)?;
    let entries = verify::run_all(&cfg.verify, cfg.seed, workers);
    let passed = entries.iter().all(|e| e.passed);
    let report = json!({ "command": "verify", "passed": passed, "entries": entries });
    write_json(&out.join("report.json"), &report)?;
    if !passed {
        let names: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
        return Err(CliError::Property(names.join(", ")));
    }
    Ok(report)
}

fn eval_json(r: &EvalResult) -> Value {
    json!({ "loss": r.loss, "accuracy": r.accuracy, "count": r.count })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, workers: usize) -> Result<Value, CliError> {
    prepare(out)?;
    let stack = cfg.stack();
    let splits = cfg.task.splits(rng::derive_seed(cfg.seed, "data"))?;
    let pad = cfg.task.spec.pad();
    let mut store = LayerStack::init(&stack, rng::derive_seed(cfg.seed, "model"))?.register()?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut io_err = None;
    let summary = train(
        &stack,
        &cfg.train,
        &mut store,
        &splits.train.samples,
        pad,
        rng::derive_seed(cfg.seed, "train"),
        workers,
        |m| {
            if let Err(e) = serde_json::to_writer(&mut metrics, m).map_err(std::io::Error::from).and_then(|_| writeln!(metrics)) {
                io_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    metrics.flush()?;
    write_json(&out.join("checkpoint.json"), &Checkpoint { config: cfg.clone(), params: store.clone() })?;
    let val = evaluate(&stack, &store, &splits.val.samples, pad, EVAL_BATCH, workers)?;
    let test = evaluate(&stack, &store, &splits.test.samples, pad, EVAL_BATCH, workers)?;
    println!("test accuracy: {:.4} (random baseline {:.4})", test.accuracy, cfg.task.spec.random_baseline());
    let report = json!({
        "command": "train",
        "steps": summary.steps,
        "final_train_loss": summary.losses.last(),
        "val": eval_json(&val),
        "test": eval_json(&test),
        "random_baseline": cfg.task.spec.random_baseline(),
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

pub fn cmd_eval(checkpoint: &Path, out: &Path, workers: usize) -> Result<Value, CliError> {
    prepare(out)?;
    let text = std::fs::read_to_string(checkpoint).map_err(|e| CliError::Validation(format!("{}: {e}", checkpoint.display())))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.config.validate()?;
    let stack = ck.config.stack();
    let splits = ck.config.task.splits(rng::derive_seed(ck.config.seed, "data"))?;
    let test = evaluate(&stack, &ck.params, &splits.test.samples, ck.config.task.spec.pad(), EVAL_BATCH, workers)?;
    println!("test accuracy: {:.4}", test.accuracy);
    let report = json!({ "command": "eval", "checkpoint": checkpoint, "test": eval_json(&test) });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    prepare(out)?;
    let b = &cfg.bench;
    let rows = run_bench(b)?;
    write_csv(&rows, BufWriter::new(File::create(out.join("bench.csv"))?))?;
    let t_max = *b.lengths.iter().max().expect("validated non-empty");
    let rec = lookup(&rows, ExecMode::Recurrent, 1, t_max);
    let conv = lookup(&rows, ExecMode::Conv, 1, t_max);
    let multi = b.scan_workers.iter().copied().filter(|&w| w > 1).max();
    let scan_multi = multi.and_then(|w| lookup(&rows, ExecMode::Scan, w, t_max));
    let slope = loglog_slope(
        &rows
            .iter()
            .filter(|r| r.mode == ExecMode::Scan && r.workers == b.scan_workers[0])
            .map(|r| (r.t as f64, r.median_s))
            .collect::<Vec<_>>(),
    );
    let agreement = match multi {
        Some(w) => Some(scan_worker_agreement(b, t_max, 1, w)?),
        None => None,
    };
    let report = json!({
        "command": "bench",
        "t_max": t_max,
        "conv_beats_recurrent": conv.zip(rec).map(|(c, r)| c < r),
        "multi_worker_scan_beats_recurrent": scan_multi.zip(rec).map(|(s, r)| s < r),
        "scan_loglog_slope": slope,
        "scan_worker_agreement": agreement,
        "available_parallelism": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Structural features of each core.
fn feature_row(kind: ModelKind) -> String {
    let structure = if kind.is_siso() { "siso" } else { "mimo" };
    let dynamics = if kind.is_lti() { "lti" } else { "ltv" };
    let transition = match kind {
        ModelKind::S4 => "diagonal_plus_low_rank",
        ModelKind::RgLru | ModelKind::S6 => "diagonal_real",
        _ => "diagonal_complex",
    };
    let discretization = match kind {
        ModelKind::S4 => "bilinear",
        ModelKind::S4d | ModelKind::S6 => "zoh",
        ModelKind::S5 => "zoh_or_bilinear",
        ModelKind::Lru | ModelKind::RgLru => "direct",
    };
    format!("{kind},{structure},{dynamics},{transition},{discretization},{}", kind.default_mode().name())
}

pub fn cmd_figure(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    prepare(out)?;
    let base = &cfg.model.core;
    let mut files: Vec<String> = Vec::new();
    let mut max_modulus = serde_json::Map::new();
    for kind in ModelKind::ALL {
        let core = CoreConfig {
            kind,
            p: if kind == ModelKind::RgLru { base.q } else { base.p },
            mode: None,
            ..base.clone()
        };
        let model = CoreModel::init(&core, rng::derive_seed(cfg.seed, kind.name()))?;
        let inputs: Vec<Sequence> = if kind.is_lti() {
            vec![]
        } else {
            (0..2)
                .map(|i| {
                    let mut r = rng::substream(cfg.seed, &format!("figure-input-{i}"));
                    Sequence::new(ndarray::Array2::from_shape_fn((64, core.q), |_| r.gen_range(-1.0..1.0)))
                })
                .collect::<ssmkit::Result<_>>()?
        };
        let points = eig_scatter(&model, &inputs)?;
        let name = format!("eig_{}.csv", kind.name());
        write_eig_csv(&points, BufWriter::new(File::create(out.join(&name))?))?;
        let m = points.iter().fold(0.0f64, |m, p| m.max(p.z.norm()));
        max_modulus.insert(kind.name().into(), json!(m));
        files.push(name);
    }
    let mut f = BufWriter::new(File::create(out.join("features.csv"))?);
    writeln!(f, "model,structure,dynamics,transition,discretization,training_engine")?;
    for kind in ModelKind::ALL {
        writeln!(f, "{}", feature_row(kind))?;
    }
    f.flush()?;
    files.push("features.csv".into());
    let report = json!({ "command": "figure", "files": files, "max_modulus": max_modulus });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}
