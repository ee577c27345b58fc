//! Property suites behind `ssmkit verify`.

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ssmkit::discretize::{bilinear, zoh};
use ssmkit::exec::{combine, run_lti, scan_with, ExecMode, ExecOptions, ScanElement};
use ssmkit::init::eig_scatter;
use ssmkit::learn::{finite_diff_check, ParamStore, Tape};
use ssmkit::models::{rglru_forward, rglru_gates, s6_compute_params, s6_forward, CoreConfig, CoreModel, ModelKind};
use ssmkit::scaffold::{stack_tape_forward, LayerStack, Pool, ScaffoldConfig, ScaffoldKind, StackConfig};
use ssmkit::system::{ContinuousSystem, DiscreteSystem, Sequence};
use ssmkit::tasks::{eval_tokens_stack, random_expr, ListOpsExpr, ListOpsLimits};
use ssmkit::{rng, Result};

use crate::config::VerifyConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Entry {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

fn entry(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Entry {
    Entry { name: name.into(), passed: measured <= tolerance, measured, tolerance, detail: detail.into() }
}

fn failed(name: &str, e: ssmkit::SsmError) -> Entry {
    Entry { name: name.into(), passed: false, measured: f64::NAN, tolerance: f64::NAN, detail: e.to_string() }
}

fn run(name: &str, f: impl FnOnce() -> Result<Entry>) -> Entry {
    f().unwrap_or_else(|e| failed(name, e))
}

/// Every suite, in a fixed order.
pub fn run_all(cfg: &VerifyConfig, seed: u64, workers: usize) -> Vec<Entry> {
    vec![
        run("engine_equivalence", || engine_equivalence(cfg.systems, seed, workers)),
        run("ltv_scan_vs_loop", || ltv_scan(seed, workers)),
        run("gradients", || gradients(seed, cfg.corrupt_backward)),
        run("discretization_golden", discretization_golden),
        run("eigen_disk", || eigen_disk(cfg.init_seeds, cfg.inject_abar)),
        run("lru_ring", || lru_ring(cfg.init_seeds)),
        run("memory_law", memory_law),
        run("scan_associativity", || associativity(seed)),
        run("scan_worker_invariance", || worker_invariance(seed)),
        run("listops_oracle", || listops_oracle(seed)),
    ]
}

fn cnormal(r: &mut impl Rng, scale: f64) -> C64 {
    C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)) * scale
}

/// Random diagonal system with `|ā| ≤ max_modulus`.
pub fn random_system(r: &mut impl Rng, p: usize, q: usize, max_modulus: f64) -> DiscreteSystem {
    let abar = Array1::from_shape_fn(p, |_| C64::from_polar(r.gen_range(0.0..=max_modulus), r.gen_range(-3.2..3.2)));
    let bbar = Array2::from_shape_fn((p, q), |_| cnormal(r, 1.0));
    let cbar = Array2::from_shape_fn((q, p), |_| cnormal(r, 1.0 / p as f64));
    let dbar = Array1::from_shape_fn(q, |_| r.gen_range(-1.0..1.0));
    DiscreteSystem::new(abar, bbar, cbar, dbar).expect("consistent shapes")
}

fn random_input(r: &mut impl Rng, t: usize, q: usize) -> Sequence {
    Sequence::new(Array2::from_shape_fn((t, q), |_| r.gen_range(-1.0..1.0))).expect("finite")
}

fn rel_diff(a: &Sequence, b: &Sequence) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-300);
    (&a.data() - &b.data()).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale
}

fn engine_equivalence(systems: usize, seed: u64, workers: usize) -> Result<Entry> {
    let mut r = rng::substream(seed, "verify-engines");
    let mut worst: f64 = 0.0;
    for _ in 0..systems {
        let (p, q) = (r.gen_range(1..=64), r.gen_range(1..=8));
        let sys = random_system(&mut r, p, q, 0.999);
        for t in [8, 257, 1024] {
            let u = random_input(&mut r, t, q);
            let rec = run_lti(&sys, &u, ExecMode::Recurrent, ExecOptions::default())?;
            let scan = run_lti(&sys, &u, ExecMode::Scan, ExecOptions { workers })?;
            let conv = run_lti(&sys, &u, ExecMode::Conv, ExecOptions { workers })?;
            worst = worst.max(rel_diff(&rec, &scan)).max(rel_diff(&rec, &conv)).max(rel_diff(&scan, &conv));
        }
    }
    Ok(entry("engine_equivalence", worst, 1e-8, format!("{systems} systems × T ∈ {{8, 257, 1024}}")))
}

fn s6_loop(m: &ssmkit::models::S6Model, u: &Sequence) -> Result<Sequence> {
    let tv = s6_compute_params(m, u)?;
    let c = tv.c.as_ref().expect("S6 streams carry Cₖ");
    let (t, n, q) = (u.len(), m.n(), m.q());
    let mut x = vec![0.0; n * q];
    let mut y = Array2::zeros((t, q));
    for k in 0..t {
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = tv.abar[[k, j]] * *xj + tv.drive[[k, j]];
        }
        for ch in 0..q {
            y[[k, ch]] = (0..n).map(|i| c[[k, i]] * x[ch * n + i]).sum::<f64>() + m.d[ch] * u.data()[[k, ch]];
        }
    }
    Sequence::new(y)
}

fn rglru_loop(m: &ssmkit::models::RgLruModel, u: &Sequence) -> Result<Sequence> {
    let (a, b) = rglru_gates(m, u)?;
    let mut x = vec![0.0; m.p()];
    let mut y = Array2::zeros((u.len(), m.p()));
    for k in 0..u.len() {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = a[[k, i]] * *xi + b[[k, i]] * u.data()[[k, i]];
            y[[k, i]] = *xi;
        }
    }
    Sequence::new(y)
}

fn ltv_scan(seed: u64, workers: usize) -> Result<Entry> {
    let mut r = rng::substream(seed, "verify-ltv");
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let t = r.gen_range(1..=512);
        let q = r.gen_range(1..=4);
        let s6 = CoreModel::init(&CoreConfig::new(ModelKind::S6, r.gen_range(1..=8), q), i)?;
        let rg = CoreModel::init(&CoreConfig::new(ModelKind::RgLru, q, q), i)?;
        let u = random_input(&mut r, t, q);
        if let CoreModel::S6(m) = &s6 {
            worst = worst.max(rel_diff(&s6_forward(m, &u, ExecOptions { workers })?, &s6_loop(m, &u)?));
        }
        if let CoreModel::RgLru(m) = &rg {
            worst = worst.max(rel_diff(&rglru_forward(m, &u, ExecOptions { workers })?, &rglru_loop(m, &u)?));
        }
    }
    Ok(entry("ltv_scan_vs_loop", worst, 1e-10, "S6 and RG-LRU, 50 instances, T ≤ 512"))
}

fn gradients(seed: u64, corrupt: bool) -> Result<Entry> {
    let mut r = rng::substream(seed, "verify-grad");
    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    let (b, t) = (2, 8);
    for kind in ModelKind::ALL {
        for sk in ScaffoldKind::ALL {
            let cfg = StackConfig {
                core: CoreConfig::new(kind, 4, 4),
                scaffold: ScaffoldConfig { kind: sk, ..Default::default() },
                pool: Pool::Mean,
                vocab: 6,
                n_classes: 3,
                ..Default::default()
            };
            let mut store = LayerStack::init(&cfg, r.gen())?.register()?;
            let tokens: Vec<usize> = (0..b * t).map(|_| r.gen_range(0..cfg.vocab)).collect();
            let lengths = vec![t, t - 3];
            let labels = [0usize, 2];
            let loss = |st: &ParamStore| -> Result<f64> {
                let mut tape = Tape::new();
                let z = stack_tape_forward(&cfg, &mut tape, st, &tokens, t, &lengths)?;
                let l = tape.cross_entropy(z, &labels)?;
                Ok(tape.scalar(l))
            };
            let mut tape = Tape::new();
            let z = stack_tape_forward(&cfg, &mut tape, &store, &tokens, t, &lengths)?;
            let l = tape.cross_entropy(z, &labels)?;
            let g = tape.backward(l)?;
            store.zero_grads();
            tape.accumulate_into(&g, &mut store);
            if corrupt {
                store.grads_mut().iter_mut().for_each(|g| *g = *g * 1.5 + 1e-2);
            }
            let check = finite_diff_check(loss, &store, 1e-5, Some(64))?;
            if check.max_rel_error > worst {
                worst = check.max_rel_error;
                where_ = format!("{kind}/{sk:?} at {}[{}]", check.worst.0, check.worst.1);
            }
        }
    }
    Ok(entry("gradients", worst, 1e-4, format!("6 kinds × 3 scaffolds, worst {where_}")))
}

fn discretization_golden() -> Result<Entry> {
    let one = |v: C64| Array1::from_elem(1, v);
    let sys = ContinuousSystem::new(
        one(C64::new(-1.0, 0.0)),
        Array2::from_elem((1, 1), C64::new(1.0, 0.0)),
        Array2::from_elem((1, 1), C64::new(1.0, 0.0)),
        Array1::zeros(1),
        0.1,
    )?;
    let b = bilinear(&sys)?.abar[0];
    let z = zoh(&sys)?.abar[0];
    let err = (b - C64::new(0.95 / 1.05, 0.0)).norm().max((z - C64::new((-0.1f64).exp(), 0.0)).norm());
    Ok(entry("discretization_golden", err, 1e-12, format!("bilinear {:.12}, zoh {:.12}", b.re, z.re)))
}

fn eigen_disk(seeds: usize, inject: Option<f64>) -> Result<Entry> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for kind in ModelKind::ALL {
        let (p, q) = if kind == ModelKind::RgLru { (4, 4) } else { (8, 2) };
        let cfg = CoreConfig::new(kind, p, q);
        for s in 0..seeds as u64 {
            let model = CoreModel::init(&cfg, s)?;
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let inputs = if kind.is_lti() { vec![] } else { vec![random_input(&mut r, 32, q)] };
            for pt in eig_scatter(&model, &inputs)? {
                let m = inject.unwrap_or(pt.z.norm());
                let bad = if kind.is_lti() { m > 1.0 } else { !(m > 0.0 && m < 1.0) };
                if bad {
                    worst = worst.max(m.max(1.0 + f64::EPSILON));
                }
                count += 1;
            }
        }
    }
    let measured = if worst == 0.0 { 1.0 } else { worst };
    let mut e = entry("eigen_disk", measured, 1.0, format!("{count} eigenvalues, 6 initializers × {seeds} seeds"));
    e.passed = worst == 0.0;
    Ok(e)
}

fn lru_ring(seeds: usize) -> Result<Entry> {
    let cfg = CoreConfig::new(ModelKind::Lru, 32, 2);
    let (lo, hi) = (cfg.lru_ring.r_min, cfg.lru_ring.r_max);
    let mut outside: f64 = 0.0;
    for s in 0..seeds as u64 {
        for pt in eig_scatter(&CoreModel::init(&cfg, s)?, &[])? {
            let m = pt.z.norm();
            outside = outside.max(lo - m).max(m - hi);
        }
    }
    Ok(entry("lru_ring", outside.max(0.0), 0.0, format!("moduli within [{lo}, {hi}]")))
}

fn memory_law() -> Result<Entry> {
    let sys = DiscreteSystem::scalar(C64::new(0.999, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 0.0), 0.0);
    let y = run_lti(&sys, &Sequence::impulse(1001, 1, 0), ExecMode::Recurrent, ExecOptions::default())?;
    let ratio = (y.data()[[1000, 0]] / y.data()[[0, 0]]).abs();
    let mut oracle = 1.0;
    for _ in 0..1000 {
        oracle *= 0.999;
    }
    Ok(entry("memory_law", (ratio - oracle).abs(), 1e-5, format!("|y(1000)/y(0)| = {ratio:.6}")))
}

fn associativity(seed: u64) -> Result<Entry> {
    let mut r = rng::substream(seed, "verify-assoc");
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let e: Vec<ScanElement<C64>> = (0..3).map(|_| ScanElement::new(cnormal(&mut r, 1.0), cnormal(&mut r, 1.0))).collect();
        let left = combine(combine(e[0], e[1]), e[2]);
        let right = combine(e[0], combine(e[1], e[2]));
        let scale = left.a.norm().max(left.b.norm()).max(1.0);
        worst = worst.max(((left.a - right.a).norm().max((left.b - right.b).norm())) / scale);
    }
    Ok(entry("scan_associativity", worst, 1e-14, "10⁴ random complex triples"))
}

fn worker_invariance(seed: u64) -> Result<Entry> {
    let mut r = rng::substream(seed, "verify-workers");
    let (t, p) = (4099, 16);
    let a = Array2::from_shape_fn((t, p), |_| cnormal(&mut r, 0.7));
    let b = Array2::from_shape_fn((t, p), |_| cnormal(&mut r, 1.0));
    let (x1, _) = scan_with(a.view(), b.view(), 1)?;
    let mut worst: f64 = 0.0;
    for w in [2, 3, 8] {
        let (xw, _) = scan_with(a.view(), b.view(), w)?;
        let scale = x1.iter().fold(0.0f64, |m, z| m.max(z.norm())).max(1e-300);
        worst = worst.max((&x1 - &xw).iter().fold(0.0f64, |m, z| m.max(z.norm())) / scale);
    }
    Ok(entry("scan_worker_invariance", worst, 1e-10, "workers 1 vs 2, 3, 8"))
}

fn listops_oracle(seed: u64) -> Result<Entry> {
    let worked: ListOpsExpr = "max(4, min(5,6, mean(9, 4, 5)))".parse()?;
    let mut mismatches = usize::from(worked.eval()? != 5);
    let mut r = rng::substream(seed, "verify-listops");
    let lim = ListOpsLimits { max_len: 128, max_depth: 6, max_args: 5 };
    for _ in 0..10_000 {
        let e = random_expr(&mut r, &lim);
        if e.eval()? != eval_tokens_stack(&e.to_tokens())? {
            mismatches += 1;
        }
    }
    Ok(entry("listops_oracle", mismatches as f64, 0.0, "worked example and 10⁴ random trees"))
}
