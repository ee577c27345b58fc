//! Initializers for every core, and the eigenvalue scatter used to plot
//! their spectra against the unit circle.
//!
//! Complex state vectors are laid out as `[half, conj(half)]`: the first
//! `p/2` entries hold one member of each conjugate pair.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};
use crate::learn::tape::softplus_inv;
use crate::models::{CoreModel, ModelKind, RgLruModel, S6Model};
use crate::rng::{self, Rng};
use crate::system::{ContinuousSystem, DiscreteSystem, Sequence};

/// Annulus `r_min ≤ |ā| < r_max` with phases in `[0, max_phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LruRing {
    pub r_min: f64,
    pub r_max: f64,
    pub max_phase: f64,
}

impl Default for LruRing {
    fn default() -> Self {
        LruRing {
            r_min: 0.9,
            r_max: 0.999,
            max_phase: 2.0 * PI,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub model_kind: ModelKind,
    pub p: usize,
    pub q: usize,
    pub lru_ring: LruRing,
    pub delta_range: (f64, f64),
    pub seed: u64,
    /// RG-LRU target band for `ā` at rest.
    pub rglru_band: (f64, f64),
    /// Upper bound on the initial `|ā|` of S4D/S5.
    pub abar_cap: Option<f64>,
}

impl InitSpec {
    pub fn new(model_kind: ModelKind, p: usize, q: usize, seed: u64) -> Self {
        InitSpec {
            model_kind,
            p,
            q,
            lru_ring: LruRing::default(),
            delta_range: (1e-3, 1e-1),
            seed,
            rglru_band: (0.9, 0.999),
            abar_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let LruRing { r_min, r_max, max_phase } = self.lru_ring;
        if !(r_min > 0.0 && r_min < r_max && r_max <= 1.0) {
            return Err(SsmError::EmptyRing { r_min, r_max });
        }
        if !(max_phase >= 0.0 && max_phase.is_finite()) {
            return Err(SsmError::InvalidArgument(format!("max_phase must be finite and ≥ 0, got {max_phase}")));
        }
        let (dmin, dmax) = self.delta_range;
        if !(dmin > 0.0 && dmin <= dmax && dmax.is_finite()) {
            return Err(SsmError::InvalidArgument(format!("invalid Δ range ({dmin}, {dmax})")));
        }
        let (lo, hi) = self.rglru_band;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(SsmError::InvalidArgument(format!("invalid RG-LRU band ({lo}, {hi})")));
        }
        if let Some(cap) = self.abar_cap {
            if !(cap > 0.0 && cap <= 1.0) {
                return Err(SsmError::InvalidArgument(format!("abar_cap must lie in (0, 1], got {cap}")));
            }
        }
        Ok(())
    }

    fn stream(&self, label: &str) -> Rng {
        rng::substream(self.seed, label)
    }
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Complex normal with `E|z|² = std²`.
fn cnormal(r: &mut Rng, std: f64) -> Complex64 {
    let s = std / 2f64.sqrt();
    Complex64::new(normal(r) * s, normal(r) * s)
}

fn log_uniform(r: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    (r.gen_range(lo.ln()..hi.ln())).exp()
}

/// `[half, conj(half)]`.
pub fn mirror(half: &[Complex64]) -> Array1<Complex64> {
    half.iter().copied().chain(half.iter().map(|z| z.conj())).collect()
}

/// `−½ + iπn` for `n < h`.
fn lin_spectrum(h: usize) -> Vec<Complex64> {
    (0..h).map(|n| Complex64::new(-0.5, PI * n as f64)).collect()
}

/// Shift real parts left so that `e^{Δ Re λ} ≤ cap`.
fn apply_cap(half: &mut [Complex64], delta: f64, cap: Option<f64>) {
    if let Some(cap) = cap {
        let bound = cap.ln() / delta;
        for l in half.iter_mut() {
            l.re = l.re.min(bound);
        }
    }
}

/// `p×q` input matrix whose rows mirror the first `p/2` rows.
fn mirrored_rows(r: &mut Rng, p: usize, q: usize, std: f64) -> Array2<Complex64> {
    let h = p / 2;
    let half = Array2::from_shape_fn((h, q), |_| cnormal(r, std));
    Array2::from_shape_fn((p, q), |(i, j)| if i < h { half[[i, j]] } else { half[[i - h, j]].conj() })
}

fn mirrored_cols(r: &mut Rng, q: usize, p: usize, std: f64) -> Array2<Complex64> {
    mirrored_rows(r, p, q, std).t().to_owned()
}

fn even(p: usize) -> Result<usize> {
    if p == 0 || p % 2 != 0 {
        return Err(SsmError::OddStateDim(p));
    }
    Ok(p / 2)
}

/// Diagonal-plus-low-rank system with `λₙ = −½ + iπn`, `r = √(n+½)` and
/// `s = −√(n+½)`, so `A = diag(λ) − r rᵀ` has its spectrum in the left half-plane.
pub fn init_s4(spec: &InitSpec) -> Result<ContinuousSystem> {
    spec.validate()?;
    let h = even(spec.p)?;
    let mut r = spec.stream("s4");
    let delta = log_uniform(&mut r, spec.delta_range);
    let lambda = mirror(&lin_spectrum(h));
    let lr: Vec<Complex64> = (0..h).map(|n| Complex64::new((n as f64 + 0.5).sqrt(), 0.0)).collect();
    let b = mirrored_rows(&mut r, spec.p, spec.q, 1.0 / (spec.q as f64).sqrt());
    let c = mirrored_cols(&mut r, spec.q, spec.p, 1.0 / (spec.p as f64).sqrt());
    let d = Array1::from_shape_fn(spec.q, |_| normal(&mut r));
    let rs = mirror(&lr);
    let s = rs.mapv(|z| -z);
    ContinuousSystem::new(lambda, b, c, d, delta)?
        .with_stable(true)?
        .with_low_rank(rs, s)
}

/// Diagonal system with `λₙ = −½ + iπn` and conjugates.
pub fn init_s4d(spec: &InitSpec) -> Result<ContinuousSystem> {
    spec.validate()?;
    let h = even(spec.p)?;
    let mut r = spec.stream("s4d");
    let delta = log_uniform(&mut r, spec.delta_range);
    let mut half = lin_spectrum(h);
    apply_cap(&mut half, delta, spec.abar_cap);
    let b = mirrored_rows(&mut r, spec.p, spec.q, 1.0 / (spec.q as f64).sqrt());
    let c = mirrored_cols(&mut r, spec.q, spec.p, 1.0 / (spec.p as f64).sqrt());
    let d = Array1::from_shape_fn(spec.q, |_| normal(&mut r));
    ContinuousSystem::new(mirror(&half), b, c, d, delta)?.with_stable(true)
}

/// `n_blocks` stacked copies of the S4D spectrum with dense `B`, `C`.
pub fn init_s5(spec: &InitSpec, n_blocks: usize) -> Result<ContinuousSystem> {
    spec.validate()?;
    if n_blocks == 0 || spec.p % n_blocks != 0 || (spec.p / n_blocks) % 2 != 0 {
        return Err(SsmError::BlockDivisibility { p: spec.p, blocks: n_blocks });
    }
    let mut r = spec.stream("s5");
    let delta = log_uniform(&mut r, spec.delta_range);
    let block = lin_spectrum(spec.p / n_blocks / 2);
    let mut half: Vec<Complex64> = (0..n_blocks).flat_map(|_| block.iter().copied()).collect();
    apply_cap(&mut half, delta, spec.abar_cap);
    let glorot = (2.0 / (spec.p + spec.q) as f64).sqrt();
    let b = mirrored_rows(&mut r, spec.p, spec.q, glorot);
    let c = mirrored_cols(&mut r, spec.q, spec.p, glorot);
    let d = Array1::from_shape_fn(spec.q, |_| normal(&mut r));
    ContinuousSystem::new(mirror(&half), b, c, d, delta)?.with_stable(true)
}

/// Ring-initialized discrete system with input normalization `B̄ = e^γ Γ`.
pub fn init_lru(spec: &InitSpec) -> Result<DiscreteSystem> {
    spec.validate()?;
    let (p, q) = (spec.p, spec.q);
    let LruRing { r_min, r_max, max_phase } = spec.lru_ring;
    let mut r = spec.stream("lru");
    let mut abar = Array1::zeros(p);
    let mut gamma = Array1::zeros(p);
    for j in 0..p {
        let u: f64 = r.gen();
        let modulus = (r_min * r_min + u * (r_max * r_max - r_min * r_min)).sqrt();
        let theta = if max_phase > 0.0 { r.gen_range(0.0..max_phase) } else { 0.0 };
        let nu_log = (-modulus.ln()).ln();
        abar[j] = lru_abar(nu_log, theta);
        gamma[j] = lru_gamma(modulus);
    }
    let gamma_mat = Array2::from_shape_fn((p, q), |_| cnormal(&mut r, 1.0 / (q as f64).sqrt()));
    let bbar = Array2::from_shape_fn((p, q), |(i, j)| gamma_mat[[i, j]] * gamma[i].exp());
    let cbar = Array2::from_shape_fn((q, p), |_| cnormal(&mut r, 1.0 / (p as f64).sqrt()));
    let dbar = Array1::from_shape_fn(q, |_| normal(&mut r));
    Ok(DiscreteSystem::new(abar, bbar, cbar, dbar)?.with_memory(true))
}

/// `ā = exp(−exp(ν) + iθ)`.
pub fn lru_abar(nu_log: f64, theta: f64) -> Complex64 {
    Complex64::new(-nu_log.exp(), theta).exp()
}

/// `γ = ½·log(1 − r²)`.
pub fn lru_gamma(modulus: f64) -> f64 {
    0.5 * (-(modulus * modulus)).ln_1p()
}

/// `Λ = (−1, …, −p)`, Glorot projections and a Δ bias inside `delta_range`.
pub fn init_s6(spec: &InitSpec) -> Result<S6Model> {
    spec.validate()?;
    let (n, q) = (spec.p, spec.q);
    let mut r = spec.stream("s6");
    let lambda = Array1::from_shape_fn(n, |i| -((i + 1) as f64));
    let g_delta = (2.0 / (q + 1) as f64).sqrt();
    let g_proj = (2.0 / (n + q) as f64).sqrt();
    let w_delta = Array1::from_shape_fn(q, |_| normal(&mut r) * g_delta);
    let w_b = Array2::from_shape_fn((n, q), |_| normal(&mut r) * g_proj);
    let w_c = Array2::from_shape_fn((n, q), |_| normal(&mut r) * g_proj);
    let b_delta = softplus_inv(log_uniform(&mut r, spec.delta_range));
    S6Model::new(lambda, w_delta, b_delta, w_b, w_c, Array1::ones(q))
}

/// Glorot gate maps and `w_A` set so `ā` at rest lies in `rglru_band`.
pub fn init_rglru(spec: &InitSpec, c: f64) -> Result<RgLruModel> {
    spec.validate()?;
    if spec.p != spec.q {
        return Err(SsmError::NonSquare { p: spec.p, q: spec.q });
    }
    let p = spec.p;
    let mut r = spec.stream("rglru");
    let (lo, hi) = spec.rglru_band;
    let w_a = Array1::from_shape_fn(p, |_| {
        let target: f64 = if lo == hi { lo } else { r.gen_range(lo..hi) };
        // exp(−c·softplus(w)·σ(0)) = target
        softplus_inv(-2.0 * target.ln() / c)
    });
    let g = (1.0 / p as f64).sqrt();
    let w_delta = Array2::from_shape_fn((p, p), |_| normal(&mut r) * g);
    let w_b = Array2::from_shape_fn((p, p), |_| normal(&mut r) * g);
    RgLruModel::new(w_a, w_delta, w_b, c)
}

/// One eigenvalue of a transition, tagged by input stream and step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigPoint {
    pub model: String,
    pub input_id: usize,
    pub step: usize,
    pub z: Complex64,
}

/// Diagonal of `Ā` for time-invariant cores, or of every `Āₖ` under each
/// sample input for selective cores.
pub fn eig_scatter(model: &CoreModel, sample_inputs: &[Sequence]) -> Result<Vec<EigPoint>> {
    let name = model.kind().name().to_string();
    let point = |input_id, step, z| EigPoint {
        model: name.clone(),
        input_id,
        step,
        z,
    };
    let mut out = Vec::new();
    match model {
        CoreModel::Lti(m) => {
            for z in m.eigenvalues()? {
                out.push(point(0, 0, z));
            }
        }
        CoreModel::S6(m) => {
            if sample_inputs.is_empty() {
                return Err(SsmError::InvalidArgument("selective models need at least one sample input".into()));
            }
            for (id, u) in sample_inputs.iter().enumerate() {
                let delta = m.delta_seq(u)?;
                for (k, &dk) in delta.iter().enumerate() {
                    for &l in m.lambda.iter() {
                        out.push(point(id, k, Complex64::new((dk * l).exp(), 0.0)));
                    }
                }
            }
        }
        CoreModel::RgLru(m) => {
            if sample_inputs.is_empty() {
                return Err(SsmError::InvalidArgument("selective models need at least one sample input".into()));
            }
            for (id, u) in sample_inputs.iter().enumerate() {
                let (abar, _) = crate::models::rglru_gates(m, u)?;
                for (k, row) in abar.rows().into_iter().enumerate() {
                    for &a in row.iter() {
                        out.push(point(id, k, Complex64::new(a, 0.0)));
                    }
                }
            }
        }
    }
    if let Some(p) = out.iter().find(|p| !(p.z.re.is_finite() && p.z.im.is_finite())) {
        return Err(SsmError::Divergence { step: p.step });
    }
    Ok(out)
}

/// CSV with header `model,input_id,step,re,im`.
pub fn write_eig_csv(points: &[EigPoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "model,input_id,step,re,im")?;
    for p in points {
        writeln!(w, "{},{},{},{:e},{:e}", p.model, p.input_id, p.step, p.z.re, p.z.im)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{bilinear_dplr, zoh};
    use crate::models::{CoreConfig, LtiParams};
    use approx::assert_abs_diff_eq;

    fn spec(kind: ModelKind, p: usize, q: usize, seed: u64) -> InitSpec {
        InitSpec::new(kind, p, q, seed)
    }

    #[test]
    fn s4_closed_form_and_stability() {
        let s = init_s4(&spec(ModelKind::S4, 2, 1, 0)).unwrap();
        assert_eq!(s.lambda[0], Complex64::new(-0.5, 0.0));
        let lr = s.low_rank.as_ref().unwrap();
        assert_abs_diff_eq!(lr.r[0].re, 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(lr.r[0].re, 0.5f64.sqrt(), epsilon = 1e-15);
        let s = init_s4(&spec(ModelKind::S4, 16, 1, 3)).unwrap();
        assert!(s.lambda.iter().all(|l| l.re < 0.0));
        let mut sys = s.clone();
        sys.delta = 1e-2;
        let eig = bilinear_dplr(&sys).unwrap().eigenvalues();
        assert!(eig.iter().all(|z| z.norm() < 1.0), "{eig:?}");
    }

    #[test]
    fn odd_state_rejected() {
        assert_eq!(init_s4(&spec(ModelKind::S4, 3, 1, 0)).unwrap_err(), SsmError::OddStateDim(3));
        assert_eq!(init_s4d(&spec(ModelKind::S4d, 5, 1, 0)).unwrap_err(), SsmError::OddStateDim(5));
    }

    #[test]
    fn s4d_closed_form() {
        let s = init_s4d(&spec(ModelKind::S4d, 8, 2, 1)).unwrap();
        for n in 0..4 {
            assert_eq!(s.lambda[n], Complex64::new(-0.5, PI * n as f64));
            assert_eq!(s.lambda[n + 4], s.lambda[n].conj());
            for j in 0..2 {
                assert_eq!(s.b[[n + 4, j]], s.b[[n, j]].conj());
                assert_eq!(s.c[[j, n + 4]], s.c[[j, n]].conj());
            }
        }
        assert!(s.lambda.iter().all(|l| l.re < 0.0));
        let d = zoh(&s).unwrap();
        assert!(d.abar.iter().all(|z| z.norm() < 1.0));
    }

    #[test]
    fn s5_blocks() {
        let one = init_s5(&spec(ModelKind::S5, 8, 2, 4), 1).unwrap();
        let s4d = init_s4d(&spec(ModelKind::S4d, 8, 2, 4)).unwrap();
        assert_eq!(one.lambda, s4d.lambda);
        let two = init_s5(&spec(ModelKind::S5, 8, 2, 4), 2).unwrap();
        let small = lin_spectrum(2);
        let expect: Vec<Complex64> = small.iter().chain(small.iter()).copied().collect();
        assert_eq!(two.lambda.slice(ndarray::s![..4]).to_vec(), expect);
        for row in two.b.rows() {
            assert!(row.iter().any(|z| z.norm() > 0.0));
        }
        assert_eq!(
            init_s5(&spec(ModelKind::S5, 8, 2, 4), 3).unwrap_err(),
            SsmError::BlockDivisibility { p: 8, blocks: 3 }
        );
    }

    #[test]
    fn lru_stored_parameters_give_exact_modulus() {
        let z = lru_abar(0.0, PI / 2.0);
        assert_abs_diff_eq!(z.norm(), 0.36787944117144233, epsilon = 1e-15);
        assert_abs_diff_eq!(z.re, 0.0, epsilon = 1e-16);
        assert_abs_diff_eq!(z.im, (-1f64).exp(), epsilon = 1e-16);
    }

    #[test]
    fn lru_ring_and_law() {
        let mut s = spec(ModelKind::Lru, 64, 4, 9);
        let sys = init_lru(&s).unwrap();
        assert!(sys.abar.iter().all(|z| (0.9..=0.999).contains(&z.norm())));
        s.lru_ring = LruRing { r_min: 0.5, r_max: 0.5, max_phase: 1.0 };
        assert!(matches!(init_lru(&s), Err(SsmError::EmptyRing { .. })));
    }

    #[test]
    fn lru_modulus_law_monte_carlo() {
        // |ā|² is uniform on [r_min², r_max²]; check mean and KS statistic.
        let n = 100_000;
        let s = spec(ModelKind::Lru, n, 1, 11);
        let sys = init_lru(&s).unwrap();
        let (a, b) = (0.9f64 * 0.9, 0.999f64 * 0.999);
        let mut sq: Vec<f64> = sys.abar.iter().map(|z| z.norm_sqr()).collect();
        let mean = sq.iter().sum::<f64>() / n as f64;
        assert!((mean / ((a + b) / 2.0) - 1.0).abs() < 0.01);
        sq.sort_by(f64::total_cmp);
        let ks = sq
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x - a) / (b - a);
                (cdf - i as f64 / n as f64).abs().max((cdf - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS = {ks}");
    }

    #[test]
    fn s6_eigenvalues() {
        let m = init_s6(&spec(ModelKind::S6, 3, 2, 0)).unwrap();
        assert_eq!(m.lambda.to_vec(), vec![-1.0, -2.0, -3.0]);
        let (lo, hi) = (1e-3, 1e-1);
        let d0 = crate::learn::tape::softplus(m.b_delta);
        assert!(d0 >= lo * (1.0 - 1e-12) && d0 <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn rglru_rest_band() {
        let m = init_rglru(&spec(ModelKind::RgLru, 6, 6, 2), 8.0).unwrap();
        let zero = Sequence::zeros(3, 6);
        let (abar, _) = crate::models::rglru_gates(&m, &zero).unwrap();
        assert!(abar.iter().all(|&a| (0.9 - 1e-12..=0.999 + 1e-12).contains(&a)));
        assert_eq!(
            init_rglru(&spec(ModelKind::RgLru, 4, 3, 0), 8.0).unwrap_err(),
            SsmError::NonSquare { p: 4, q: 3 }
        );
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in ModelKind::ALL {
            let cfg = CoreConfig::new(kind, 4, if kind == ModelKind::RgLru { 4 } else { 2 });
            let a = CoreModel::init(&cfg, 77).unwrap();
            let b = CoreModel::init(&cfg, 77).unwrap();
            let c = CoreModel::init(&cfg, 78).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn disk_condition_over_seeds() {
        for seed in 0..100 {
            for kind in [ModelKind::S4, ModelKind::S4d, ModelKind::S5, ModelKind::Lru] {
                let cfg = CoreConfig::new(kind, 8, 2);
                let CoreModel::Lti(m) = CoreModel::init(&cfg, seed).unwrap() else { unreachable!() };
                assert!(m.eigenvalues().unwrap().iter().all(|z| z.norm() <= 1.0), "{kind} seed {seed}");
            }
        }
    }

    #[test]
    fn scatter_examples() {
        let s6 = S6Model::new(
            Array1::from(vec![-1.0, -2.0]),
            Array1::zeros(1),
            0.0,
            Array2::zeros((2, 1)),
            Array2::zeros((2, 1)),
            Array1::zeros(1),
        )
        .unwrap();
        let pts = eig_scatter(&CoreModel::S6(s6), &[Sequence::zeros(1, 1)]).unwrap();
        assert_abs_diff_eq!(pts[0].z.re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(pts[1].z.re, 0.25, epsilon = 1e-15);

        let cfg = CoreConfig::new(ModelKind::S6, 4, 2);
        let m = CoreModel::init(&cfg, 5).unwrap();
        let mut r = rng::substream(1, "inputs");
        let u1 = Sequence::new(Array2::from_shape_fn((8, 2), |_| r.gen_range(-2.0..2.0))).unwrap();
        let u2 = Sequence::new(Array2::from_shape_fn((8, 2), |_| r.gen_range(-2.0..2.0))).unwrap();
        let pts = eig_scatter(&m, &[u1, u2]).unwrap();
        let cloud = |id| pts.iter().filter(|p| p.input_id == id).map(|p| p.z.re).collect::<Vec<_>>();
        assert_ne!(cloud(0), cloud(1));
        assert!(pts.iter().all(|p| p.z.re > 0.0 && p.z.re < 1.0));
        assert!(eig_scatter(&m, &[]).is_err());

        let lru = CoreModel::init(&CoreConfig::new(ModelKind::Lru, 16, 2), 0).unwrap();
        let pts = eig_scatter(&lru, &[]).unwrap();
        assert!(pts.iter().all(|p| (0.9..=0.999).contains(&p.z.norm())));
        let mut csv = Vec::new();
        write_eig_csv(&pts, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("model,input_id,step,re,im\nlru,0,0,"));
    }

    #[test]
    fn capped_s4d_stays_under_cap() {
        let mut cfg = CoreConfig::new(ModelKind::S4d, 8, 3);
        cfg.abar_cap = Some(0.5);
        let CoreModel::Lti(m) = CoreModel::init(&cfg, 1).unwrap() else { unreachable!() };
        assert!(m.eigenvalues().unwrap().iter().all(|z| z.norm() <= 0.5 + 1e-12));
        assert!(matches!(m.params, LtiParams::Siso(_)));
    }
}
