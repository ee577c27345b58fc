use ndarray::{Array1, Array2, Array3, Axis};

use super::lti::key;
use crate::discretize::zoh_timevarying;
use crate::error::{Result, SsmError};
use crate::exec::{scan_with, ExecOptions};
use crate::learn::tape::{sigmoid, softplus};
use crate::learn::{ParamGroup, ParamStore};
use crate::system::{Sequence, TimeVaryingParams};

/// Selective core with `n` real states per channel, shared `Bₖ`, `Cₖ` and
/// a scalar step size `Δₖ = softplus(w_Δ·u(k) + b_Δ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct S6Model {
    /// Strictly negative.
    pub lambda: Array1<f64>,
    pub w_delta: Array1<f64>,
    pub b_delta: f64,
    /// `n × q`
    pub w_b: Array2<f64>,
    /// `n × q`
    pub w_c: Array2<f64>,
    pub d: Array1<f64>,
}

impl S6Model {
    pub fn new(
        lambda: Array1<f64>,
        w_delta: Array1<f64>,
        b_delta: f64,
        w_b: Array2<f64>,
        w_c: Array2<f64>,
        d: Array1<f64>,
    ) -> Result<Self> {
        let (n, q) = (lambda.len(), w_delta.len());
        if n == 0 || q == 0 {
            return Err(SsmError::InvalidArgument("p and q must be ≥ 1".into()));
        }
        if w_b.dim() != (n, q) || w_c.dim() != (n, q) || d.len() != q {
            return Err(SsmError::shape("S6Model", format!("{n}x{q}"), format!("{:?}/{:?}", w_b.dim(), w_c.dim())));
        }
        if let Some(i) = lambda.iter().position(|l| !(*l < 0.0)) {
            return Err(SsmError::InvalidArgument(format!("λ{i} = {} must be negative", lambda[i])));
        }
        Ok(S6Model { lambda, w_delta, b_delta, w_b, w_c, d })
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn q(&self) -> usize {
        self.w_delta.len()
    }

    fn check_input(&self, u: &Sequence) -> Result<()> {
        if u.channels() != self.q() {
            return Err(SsmError::shape("S6 input channels", self.q(), u.channels()));
        }
        Ok(())
    }

    /// `Δₖ` for every step.
    pub fn delta_seq(&self, u: &Sequence) -> Result<Array1<f64>> {
        self.check_input(u)?;
        Ok(u.data().dot(&self.w_delta).mapv(|z| softplus(z + self.b_delta)))
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let k = |n: &str| key(prefix, n);
        let row = |v: &Array1<f64>| v.clone().insert_axis(Axis(0));
        store.add(k("a_log"), row(&self.lambda.mapv(|l| (-l).ln())), ParamGroup::Dynamics)?;
        store.add(k("w_delta"), row(&self.w_delta), ParamGroup::Default)?;
        store.add(k("b_delta"), Array2::from_elem((1, 1), self.b_delta), ParamGroup::Dynamics)?;
        store.add(k("w_b"), self.w_b.clone(), ParamGroup::Default)?;
        store.add(k("w_c"), self.w_c.clone(), ParamGroup::Default)?;
        store.add(k("d"), row(&self.d), ParamGroup::Default)
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.get(&key(prefix, n));
        S6Model::new(
            get("a_log")?.row(0).mapv(|a| -a.exp()),
            get("w_delta")?.row(0).to_owned(),
            store.scalar(&key(prefix, "b_delta"))?,
            get("w_b")?.to_owned(),
            get("w_c")?.to_owned(),
            get("d")?.row(0).to_owned(),
        )
    }
}

/// Per-step streams of an S6 core under input `u`.
///
/// The state is laid out channel-major: column `c·n + i` holds state `i`
/// of channel `c`. `c` carries `Cₖ` (`T × n`).
pub fn s6_compute_params(m: &S6Model, u: &Sequence) -> Result<TimeVaryingParams<f64>> {
    let delta = m.delta_seq(u)?;
    let (t, n, q) = (u.len(), m.n(), m.q());
    let bk = u.data().dot(&m.w_b.t());
    let ck = u.data().dot(&m.w_c.t());
    let b_seq = Array3::from_shape_fn((t, n, 1), |(k, i, _)| bk[[k, i]]);
    let tv = zoh_timevarying(m.lambda.view(), delta.view(), b_seq.view())?;
    let abar = Array2::from_shape_fn((t, n * q), |(k, j)| tv.abar[[k, j % n]]);
    let drive = Array2::from_shape_fn((t, n * q), |(k, j)| tv.bbar[[k, j % n, 0]] * u.data()[[k, j / n]]);
    TimeVaryingParams::new(abar, drive, Some(ck), Some(delta))
}

fn readout(m: &S6Model, x: &Array2<f64>, ck: &Array2<f64>, u: &Sequence) -> Result<Sequence> {
    let (n, q) = (m.n(), m.q());
    let y = Array2::from_shape_fn((u.len(), q), |(k, c)| {
        (0..n).map(|i| ck[[k, i]] * x[[k, c * n + i]]).sum::<f64>() + m.d[c] * u.data()[[k, c]]
    });
    Sequence::new(y)
}

fn first_non_finite(x: &Array2<f64>) -> Option<usize> {
    x.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite()))
}

pub fn s6_forward(m: &S6Model, u: &Sequence, opts: ExecOptions) -> Result<Sequence> {
    let tv = s6_compute_params(m, u)?;
    let (x, _) = scan_with(tv.abar.view(), tv.drive.view(), opts.workers)?;
    if let Some(step) = first_non_finite(&x) {
        return Err(SsmError::Divergence { step });
    }
    readout(m, &x, tv.c.as_ref().expect("S6 streams carry Cₖ"), u)
}

/// Real gated recurrence `x(k) = āₖ ⊙ x(k−1) + b̄ₖ ⊙ u(k)`, `y = x`, with
/// `āₖ = exp(−c·softplus(w_A) ⊙ σ(W_Δ u(k)))` and
/// `b̄ₖ = √(1 − āₖ²) ⊙ σ(W_B u(k))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgLruModel {
    pub w_a: Array1<f64>,
    pub w_delta: Array2<f64>,
    pub w_b: Array2<f64>,
    pub c: f64,
}

impl RgLruModel {
    pub fn new(w_a: Array1<f64>, w_delta: Array2<f64>, w_b: Array2<f64>, c: f64) -> Result<Self> {
        let p = w_a.len();
        if p == 0 {
            return Err(SsmError::InvalidArgument("p must be ≥ 1".into()));
        }
        if w_delta.dim() != (p, p) || w_b.dim() != (p, p) {
            return Err(SsmError::shape("RgLruModel gates", format!("{p}x{p}"), format!("{:?}", w_delta.dim())));
        }
        if !(c > 0.0) {
            return Err(SsmError::InvalidArgument(format!("c must be positive, got {c}")));
        }
        Ok(RgLruModel { w_a, w_delta, w_b, c })
    }

    pub fn p(&self) -> usize {
        self.w_a.len()
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let k = |n: &str| key(prefix, n);
        store.add(k("w_a"), self.w_a.clone().insert_axis(Axis(0)), ParamGroup::Dynamics)?;
        store.add(k("w_delta"), self.w_delta.clone(), ParamGroup::Default)?;
        store.add(k("w_b"), self.w_b.clone(), ParamGroup::Default)
    }

    pub fn from_store(store: &ParamStore, prefix: &str, c: f64) -> Result<Self> {
        let get = |n: &str| store.get(&key(prefix, n));
        RgLruModel::new(get("w_a")?.row(0).to_owned(), get("w_delta")?.to_owned(), get("w_b")?.to_owned(), c)
    }
}

/// `(āₖ, b̄ₖ)` as `T × p` arrays.
pub fn rglru_gates(m: &RgLruModel, u: &Sequence) -> Result<(Array2<f64>, Array2<f64>)> {
    if u.channels() != m.p() {
        return Err(SsmError::shape("RG-LRU input channels", m.p(), u.channels()));
    }
    let r = u.data().dot(&m.w_delta.t()).mapv(sigmoid);
    let i = u.data().dot(&m.w_b.t()).mapv(sigmoid);
    let rate = m.w_a.mapv(|w| -m.c * softplus(w));
    let loga = &r * &rate;
    let abar = loga.mapv(f64::exp);
    let bbar = loga.mapv(|l| (-(2.0 * l).exp_m1()).sqrt()) * &i;
    Ok((abar, bbar))
}

pub fn rglru_forward(m: &RgLruModel, u: &Sequence, opts: ExecOptions) -> Result<Sequence> {
    let (abar, bbar) = rglru_gates(m, u)?;
    let drive = bbar * &u.data();
    let (x, _) = scan_with(abar.view(), drive.view(), opts.workers)?;
    if let Some(step) = first_non_finite(&x) {
        return Err(SsmError::Divergence { step });
    }
    Sequence::new(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::zoh;
    use crate::exec::testutil::{max_rel_diff, random_input};
    use crate::exec::{run_recurrent, ExecMode};
    use crate::init::{init_rglru, init_s6, InitSpec};
    use crate::models::ModelKind;
    use crate::system::{ContinuousSystem, DiscreteSystem};
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s6(n: usize, q: usize, seed: u64) -> S6Model {
        init_s6(&InitSpec::new(ModelKind::S6, n, q, seed)).unwrap()
    }

    fn rglru(p: usize, seed: u64) -> RgLruModel {
        init_rglru(&InitSpec::new(ModelKind::RgLru, p, p, seed), 8.0).unwrap()
    }

    /// Step-by-step evaluation straight from the definitions.
    fn s6_loop(m: &S6Model, u: &Sequence) -> Sequence {
        let (n, q) = (m.n(), m.q());
        let mut x = Array2::<f64>::zeros((q, n));
        let mut y = Array2::zeros((u.len(), q));
        for k in 0..u.len() {
            let uk = u.step(k);
            let delta = softplus(uk.dot(&m.w_delta) + m.b_delta);
            let b = m.w_b.dot(&uk);
            let c = m.w_c.dot(&uk);
            for ch in 0..q {
                for i in 0..n {
                    let a = (delta * m.lambda[i]).exp();
                    let bbar = (a - 1.0) / m.lambda[i] * b[i];
                    x[[ch, i]] = a * x[[ch, i]] + bbar * uk[ch];
                }
                y[[k, ch]] = c.dot(&x.row(ch)) + m.d[ch] * uk[ch];
            }
        }
        Sequence::new(y).unwrap()
    }

    fn rglru_loop(m: &RgLruModel, u: &Sequence) -> Sequence {
        let p = m.p();
        let mut x = Array1::<f64>::zeros(p);
        let mut y = Array2::zeros((u.len(), p));
        for k in 0..u.len() {
            let uk = u.step(k);
            for i in 0..p {
                let r = sigmoid(m.w_delta.row(i).dot(&uk));
                let g = sigmoid(m.w_b.row(i).dot(&uk));
                let a = (-m.c * softplus(m.w_a[i]) * r).exp();
                x[i] = a * x[i] + (1.0 - a * a).sqrt() * g * uk[i];
            }
            y.row_mut(k).assign(&x);
        }
        Sequence::new(y).unwrap()
    }

    #[test]
    fn s6_step_size_example() {
        let m = S6Model::new(
            Array1::from(vec![-1.0]),
            Array1::zeros(1),
            crate::learn::tape::softplus_inv(2f64.ln()),
            Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
            Array1::zeros(1),
        )
        .unwrap();
        let tv = s6_compute_params(&m, &Sequence::zeros(3, 1)).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(tv.abar[[k, 0]], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn s6_delta_is_monotone_in_projection() {
        let m = s6(2, 1, 0);
        let w = m.w_delta[0];
        let u = Sequence::scalar(&[-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let d = m.delta_seq(&u).unwrap();
        for k in 1..5 {
            assert_eq!(d[k] > d[k - 1], w > 0.0);
        }
    }

    #[test]
    fn s6_without_input_map_is_feedthrough() {
        let mut m = s6(4, 3, 1);
        m.w_b.fill(0.0);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let u = random_input(&mut r, 20, 3);
        let y = s6_forward(&m, &u, ExecOptions::default()).unwrap();
        let expect = &u.data() * &m.d;
        assert!(y.data().iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn s6_scan_matches_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let m = s6(4, 3, seed);
            let u = random_input(&mut r, 64, 3);
            let a = s6_forward(&m, &u, ExecOptions::default()).unwrap();
            assert!(max_rel_diff(&a, &s6_loop(&m, &u)) < 1e-10);
        }
    }

    #[test]
    fn s6_constant_input_collapses_to_frozen_system() {
        let m = s6(3, 2, 4);
        let uk = Array1::from(vec![0.7, -0.4]);
        let u = Sequence::new(Array2::from_shape_fn((50, 2), |(_, c)| uk[c])).unwrap();
        let (n, q) = (m.n(), m.q());
        let delta = softplus(uk.dot(&m.w_delta) + m.b_delta);
        let b = m.w_b.dot(&uk);
        let c = m.w_c.dot(&uk);
        let cs = ContinuousSystem::new(
            Array1::from_shape_fn(n * q, |j| Complex64::new(m.lambda[j % n], 0.0)),
            Array2::from_shape_fn((n * q, q), |(j, ch)| Complex64::new(if j / n == ch { b[j % n] } else { 0.0 }, 0.0)),
            Array2::from_shape_fn((q, n * q), |(ch, j)| Complex64::new(if j / n == ch { c[j % n] } else { 0.0 }, 0.0)),
            m.d.clone(),
            delta,
        )
        .unwrap();
        let frozen = run_recurrent(&zoh(&cs).unwrap(), &u).unwrap();
        let y = s6_forward(&m, &u, ExecOptions::default()).unwrap();
        assert!(max_rel_diff(&y, &frozen) < 1e-10);
    }

    #[test]
    fn rglru_worked_example() {
        let m = RgLruModel::new(Array1::zeros(2), Array2::zeros((2, 2)), Array2::zeros((2, 2)), 8.0).unwrap();
        let (a, b) = rglru_gates(&m, &Sequence::zeros(1, 2)).unwrap();
        assert_abs_diff_eq!(a[[0, 0]], 0.0625, epsilon = 1e-15);
        assert_abs_diff_eq!(b[[0, 0]], 0.5 * (1.0 - 0.0625f64 * 0.0625).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(b[[0, 0]], 0.499023, epsilon = 1e-6);
    }

    #[test]
    fn rglru_scan_matches_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..10 {
            let m = rglru(5, seed);
            let u = random_input(&mut r, 100, 5);
            let a = rglru_forward(&m, &u, ExecOptions::default()).unwrap();
            assert!(max_rel_diff(&a, &rglru_loop(&m, &u)) < 1e-10);
        }
    }

    #[test]
    fn rglru_constant_input_collapses_to_frozen_system() {
        let m = rglru(3, 7);
        let uk = Array1::from(vec![0.3, -1.2, 0.5]);
        let u = Sequence::new(Array2::from_shape_fn((80, 3), |(_, c)| uk[c])).unwrap();
        let (a, b) = rglru_gates(&m, &u).unwrap();
        let frozen = DiscreteSystem::new(
            a.row(0).mapv(|v| Complex64::new(v, 0.0)),
            Array2::from_shape_fn((3, 3), |(i, j)| Complex64::new(if i == j { b[[0, i]] } else { 0.0 }, 0.0)),
            Array2::from_shape_fn((3, 3), |(i, j)| Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)),
            Array1::zeros(3),
        )
        .unwrap();
        let y = rglru_forward(&m, &u, ExecOptions::default()).unwrap();
        let oracle = crate::exec::run_lti(&frozen, &u, ExecMode::Recurrent, ExecOptions::default()).unwrap();
        assert!(max_rel_diff(&y, &oracle) < 1e-10);
    }

    #[test]
    fn selective_cores_are_not_linear() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let u = random_input(&mut r, 30, 2);
        let u2 = u.scaled(2.0);
        let m = s6(3, 2, 0);
        let (y1, y2) = (s6_forward(&m, &u, ExecOptions::default()).unwrap(), s6_forward(&m, &u2, ExecOptions::default()).unwrap());
        assert!(max_rel_diff(&y2, &y1.scaled(2.0)) > 1e-3);
        let g = rglru(2, 0);
        let (y1, y2) = (rglru_forward(&g, &u, ExecOptions::default()).unwrap(), rglru_forward(&g, &u2, ExecOptions::default()).unwrap());
        assert!(max_rel_diff(&y2, &y1.scaled(2.0)) > 1e-3);
    }

    #[test]
    fn rglru_one_step_contraction() {
        // a|x| + √(1−a²)|u| ≤ √2·max(|x|, |u|) by Cauchy–Schwarz.
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let a: f64 = r.gen_range(0.0..1.0);
            let (x, u): (f64, f64) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
            let next = a * x.abs() + (1.0 - a * a).sqrt() * u.abs();
            assert!(next <= 2f64.sqrt() * x.abs().max(u.abs()) + 1e-12);
        }
    }

    #[test]
    fn rglru_state_obeys_geometric_bound() {
        // |x(k)| ≤ sup|u| · max_k √(1−āₖ²) / (1 − max_k āₖ) from the unrolled sum.
        let mut r = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..20 {
            let m = rglru(4, seed);
            let u = Sequence::new(Array2::from_shape_fn((512, 4), |_| r.gen_range(-1.0..1.0))).unwrap();
            let (a, _) = rglru_gates(&m, &u).unwrap();
            let amax = a.fold(0.0f64, |m, &v| m.max(v));
            let root = a.fold(0.0f64, |m, &v| m.max((1.0 - v * v).sqrt()));
            let y = rglru_forward(&m, &u, ExecOptions::default()).unwrap();
            assert!(y.max_abs() <= u.max_abs() * root / (1.0 - amax) * (1.0 + 1e-12), "seed {seed}");
        }
    }

    #[test]
    fn rglru_state_can_exceed_root_two_times_input() {
        // A persistent input accumulates: the fixed point is b̄u/(1−ā), not ≤ √2·u.
        let m = RgLruModel::new(
            Array1::from_elem(1, crate::learn::tape::softplus_inv(-2.0 * 0.99f64.ln() / 4.0)),
            Array2::zeros((1, 1)),
            Array2::from_elem((1, 1), 50.0),
            4.0,
        )
        .unwrap();
        let u = Sequence::scalar(&[1.0; 2000]).unwrap();
        let y = rglru_forward(&m, &u, ExecOptions::default()).unwrap();
        let (a, b) = (0.99f64, (1.0 - 0.99f64 * 0.99).sqrt());
        assert_abs_diff_eq!(y.data()[[1999, 0]], b / (1.0 - a), epsilon = 1e-6);
        assert!(y.max_abs() > 2f64.sqrt() * u.max_abs());
    }

    #[test]
    fn store_round_trip() {
        let m = s6(3, 2, 1);
        let mut st = ParamStore::new();
        m.register(&mut st, "x").unwrap();
        let back = S6Model::from_store(&st, "x").unwrap();
        for (a, b) in m.lambda.iter().zip(back.lambda.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
        let g = rglru(3, 1);
        let mut st = ParamStore::new();
        g.register(&mut st, "").unwrap();
        assert_eq!(RgLruModel::from_store(&st, "", 8.0).unwrap(), g);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn selective_transitions_stay_in_unit_interval(seed in 0u64..1000, scale in 0.1f64..4.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let u = Sequence::new(Array2::from_shape_fn((16, 3), |_| r.gen_range(-scale..scale))).unwrap();
            let m = s6(4, 3, seed);
            let tv = s6_compute_params(&m, &u).unwrap();
            prop_assert!(tv.abar.iter().all(|&a| a > 0.0 && a < 1.0));
            let g = rglru(3, seed);
            let (a, _) = rglru_gates(&g, &u).unwrap();
            prop_assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        /// At extreme input scales Δ can underflow below one ulp of |λ|⁻¹, so
        /// exp(Δλ) rounds to exactly 1; the closed interval still holds.
        #[test]
        fn selective_transitions_stay_in_closed_interval(seed in 0u64..1000, scale in 4.0f64..40.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let u = Sequence::new(Array2::from_shape_fn((16, 3), |_| r.gen_range(-scale..scale))).unwrap();
            let tv = s6_compute_params(&s6(4, 3, seed), &u).unwrap();
            prop_assert!(tv.abar.iter().all(|&a| (0.0..=1.0).contains(&a)));
            let (a, _) = rglru_gates(&rglru(3, seed), &u).unwrap();
            prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
