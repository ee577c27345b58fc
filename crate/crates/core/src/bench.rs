//! Wall-clock comparison of the three LTI engines.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};
use crate::exec::{run_lti, ExecMode, ExecOptions};
use crate::models::{CoreConfig, CoreModel, ModelKind};
use crate::rng;
use crate::system::{DiscreteSystem, Sequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub kind: ModelKind,
    pub p: usize,
    pub q: usize,
    /// Sequence lengths, each timed separately.
    pub lengths: Vec<usize>,
    pub repeats: usize,
    /// Worker counts tried for the scan engine.
    pub scan_workers: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kind: ModelKind::Lru,
            p: 16,
            q: 4,
            lengths: (10..=16).map(|e| 1usize << e).collect(),
            repeats: 5,
            scan_workers: vec![1, 8],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: ExecMode,
    pub workers: usize,
    pub t: usize,
    pub median_s: f64,
    pub min_s: f64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.kind.is_lti() {
            return Err(SsmError::NotTimeInvariant);
        }
        if self.repeats == 0 || self.lengths.is_empty() || self.lengths.contains(&0) || self.scan_workers.contains(&0) {
            return Err(SsmError::InvalidArgument("bench needs repeats ≥ 1 and positive lengths and workers".into()));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<DiscreteSystem> {
        let cfg = CoreConfig::new(self.kind, self.p, self.q);
        match CoreModel::init(&cfg, rng::derive_seed(self.seed, "bench-system"))? {
            CoreModel::Lti(m) => m.discrete(),
            _ => Err(SsmError::NotTimeInvariant),
        }
    }

    pub fn input(&self, t: usize) -> Sequence {
        let mut r = rng::substream(self.seed, &format!("bench-input-{t}"));
        Sequence::new(ndarray::Array2::from_shape_fn((t, self.q), |_| r.gen_range(-1.0..1.0))).expect("finite input")
    }
}

/// Median of a non-empty slice; the upper middle for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn time_mode(sys: &DiscreteSystem, u: &Sequence, mode: ExecMode, workers: usize, repeats: usize) -> Result<(f64, f64)> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let y = run_lti(sys, u, mode, ExecOptions { workers })?;
        times.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(y);
    }
    Ok((median(&times), times.iter().copied().fold(f64::INFINITY, f64::min)))
}

/// One row per (mode, workers, length).
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let sys = cfg.system()?;
    let mut rows = Vec::new();
    for &t in &cfg.lengths {
        let u = cfg.input(t);
        let mut runs = vec![(ExecMode::Recurrent, 1), (ExecMode::Conv, 1)];
        runs.extend(cfg.scan_workers.iter().map(|&w| (ExecMode::Scan, w)));
        for (mode, workers) in runs {
            let (median_s, min_s) = time_mode(&sys, &u, mode, workers, cfg.repeats)?;
            rows.push(BenchRow { mode, workers, t, median_s, min_s });
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[BenchRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "mode,workers,t,median_s,min_s")?;
    for r in rows {
        writeln!(w, "{},{},{},{:e},{:e}", r.mode.name(), r.workers, r.t, r.median_s, r.min_s)?;
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Largest relative disagreement between scan outputs at two worker counts.
pub fn scan_worker_agreement(cfg: &BenchConfig, t: usize, a: usize, b: usize) -> Result<f64> {
    let sys = cfg.system()?;
    let u = cfg.input(t);
    let ya = run_lti(&sys, &u, ExecMode::Scan, ExecOptions { workers: a })?;
    let yb = run_lti(&sys, &u, ExecMode::Scan, ExecOptions { workers: b })?;
    let scale = ya.max_abs().max(1e-300);
    Ok((&ya.data() - &yb.data()).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale)
}

/// Median seconds for `(mode, workers)` at length `t`.
pub fn lookup(rows: &[BenchRow], mode: ExecMode, workers: usize, t: usize) -> Option<f64> {
    rows.iter().find(|r| r.mode == mode && r.workers == workers && r.t == t).map(|r| r.median_s)
}
