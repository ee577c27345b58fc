use ndarray::{Array1, Array2};
use num_complex::Complex64;

use super::{CoreConfig, Discretization, ModelKind};
use crate::discretize::{bilinear, bilinear_dplr, zoh, DplrDiscrete};
use crate::error::{Result, SsmError};
use crate::exec::{run_lti, ExecMode, ExecOptions};
use crate::init::{self, mirror, InitSpec};
use crate::learn::{ParamGroup, ParamStore};
use crate::rng;
use crate::system::{ContinuousSystem, DiscreteSystem, Sequence};

#[derive(Clone, Debug, PartialEq)]
pub enum LtiParams {
    /// One `p`-state subsystem per channel, all sharing `Δ`.
    Siso(Vec<ContinuousSystem>),
    Mimo(ContinuousSystem),
    /// Directly parameterized discrete system.
    Lru(DiscreteSystem),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LtiModel {
    pub kind: ModelKind,
    pub params: LtiParams,
    pub discretization: Discretization,
}

pub(crate) fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn row(v: impl IntoIterator<Item = f64>) -> Array2<f64> {
    let v: Vec<f64> = v.into_iter().collect();
    Array2::from_shape_vec((1, v.len()), v).expect("row")
}

impl LtiModel {
    /// S4 or S4D with `spec.q` single-channel subsystems.
    pub fn init_siso(spec: &InitSpec) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::substream(spec.seed, "siso-delta");
        let (lo, hi) = spec.delta_range;
        let delta = if lo == hi { lo } else { rand::Rng::gen_range(&mut r, lo.ln()..hi.ln()).exp() };
        let channels = (0..spec.q)
            .map(|c| {
                let sub = InitSpec {
                    q: 1,
                    seed: rng::derive_index(spec.seed, c as u64),
                    delta_range: (delta, delta),
                    ..spec.clone()
                };
                match spec.model_kind {
                    ModelKind::S4 => init::init_s4(&sub),
                    ModelKind::S4d => init::init_s4d(&sub),
                    k => Err(SsmError::InvalidArgument(format!("{k} is not a single-input kind"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LtiModel {
            kind: spec.model_kind,
            params: LtiParams::Siso(channels),
            discretization: if spec.model_kind == ModelKind::S4 {
                Discretization::Bilinear
            } else {
                Discretization::Zoh
            },
        })
    }

    pub fn q(&self) -> usize {
        match &self.params {
            LtiParams::Siso(v) => v.len(),
            LtiParams::Mimo(s) => s.q(),
            LtiParams::Lru(s) => s.q(),
        }
    }

    /// Diagonal discrete system for every kind except S4.
    pub fn discrete(&self) -> Result<DiscreteSystem> {
        let sys = match &self.params {
            LtiParams::Siso(chans) => {
                if self.kind == ModelKind::S4 {
                    return Err(SsmError::InvalidArgument("S4's transition is not diagonal".into()));
                }
                let parts = chans.iter().map(zoh).collect::<Result<Vec<_>>>()?;
                block_diagonal(&parts)?
            }
            LtiParams::Mimo(s) => match self.discretization {
                Discretization::Zoh => zoh(s)?,
                Discretization::Bilinear => bilinear(s)?,
            },
            LtiParams::Lru(s) => s.clone(),
        };
        Ok(sys.with_memory(true))
    }

    /// Per-channel implicit S4 transitions.
    pub fn dplr(&self) -> Result<Vec<DplrDiscrete>> {
        match &self.params {
            LtiParams::Siso(chans) if self.kind == ModelKind::S4 => chans.iter().map(bilinear_dplr).collect(),
            _ => Err(SsmError::InvalidArgument(format!("{} has no low-rank term", self.kind))),
        }
    }

    /// Spectrum of `Ā`.
    pub fn eigenvalues(&self) -> Result<Vec<Complex64>> {
        if self.kind == ModelKind::S4 {
            return Ok(self.dplr()?.iter().flat_map(|d| d.eigenvalues()).collect());
        }
        Ok(self.discrete()?.abar.to_vec())
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let k = |n: &str| key(prefix, n);
        let dy = ParamGroup::Dynamics;
        let df = ParamGroup::Default;
        match (&self.params, self.kind) {
            (LtiParams::Siso(chans), ModelKind::S4d) => {
                let h = chans[0].p() / 2;
                let lam = || chans.iter().flat_map(|s| s.lambda.iter().take(h).copied());
                store.add(k("lambda_re_log"), row(lam().map(|l| (-l.re).ln())), dy)?;
                store.add(k("lambda_im"), row(lam().map(|l| l.im)), dy)?;
                store.add(k("log_delta"), row([chans[0].delta.ln()]), dy)?;
                let b = || chans.iter().flat_map(|s| (0..h).map(move |n| s.b[[n, 0]]));
                let c = || chans.iter().flat_map(|s| (0..h).map(move |n| s.c[[0, n]]));
                store.add(k("b_re"), row(b().map(|z| z.re)), df)?;
                store.add(k("b_im"), row(b().map(|z| z.im)), df)?;
                store.add(k("c_re"), row(c().map(|z| z.re)), df)?;
                store.add(k("c_im"), row(c().map(|z| z.im)), df)?;
                store.add(k("d"), row(chans.iter().map(|s| s.d[0])), df)?;
            }
            (LtiParams::Siso(chans), ModelKind::S4) => {
                let (q, h) = (chans.len(), chans[0].p() / 2);
                let mat = |f: &dyn Fn(&ContinuousSystem, usize) -> f64| {
                    Array2::from_shape_fn((q, h), |(c, n)| f(&chans[c], n))
                };
                let lr = |s: &ContinuousSystem| s.low_rank.clone().expect("S4 channels carry a low-rank term");
                store.add(k("lambda_re_log"), mat(&|s, n| (-s.lambda[n].re).ln()), dy)?;
                store.add(k("lambda_im"), mat(&|s, n| s.lambda[n].im), dy)?;
                store.add(k("r_re"), mat(&|s, n| lr(s).r[n].re), dy)?;
                store.add(k("r_im"), mat(&|s, n| lr(s).r[n].im), dy)?;
                store.add(k("s_re"), mat(&|s, n| lr(s).s[n].re), dy)?;
                store.add(k("s_im"), mat(&|s, n| lr(s).s[n].im), dy)?;
                store.add(k("log_delta"), row([chans[0].delta.ln()]), dy)?;
                store.add(k("b_re"), mat(&|s, n| s.b[[n, 0]].re), df)?;
                store.add(k("b_im"), mat(&|s, n| s.b[[n, 0]].im), df)?;
                store.add(k("c_re"), mat(&|s, n| s.c[[0, n]].re), df)?;
                store.add(k("c_im"), mat(&|s, n| s.c[[0, n]].im), df)?;
                store.add(k("d"), row(chans.iter().map(|s| s.d[0])), df)?;
            }
            (LtiParams::Mimo(s), _) => {
                let (q, h) = (s.q(), s.p() / 2);
                store.add(k("lambda_re_log"), row(s.lambda.iter().take(h).map(|l| (-l.re).ln())), dy)?;
                store.add(k("lambda_im"), row(s.lambda.iter().take(h).map(|l| l.im)), dy)?;
                store.add(k("log_delta"), row([s.delta.ln()]), dy)?;
                let bt = |f: fn(Complex64) -> f64| Array2::from_shape_fn((q, h), |(j, n)| f(s.b[[n, j]]));
                let cm = |f: fn(Complex64) -> f64| Array2::from_shape_fn((q, h), |(j, n)| f(s.c[[j, n]]));
                store.add(k("b_re"), bt(|z| z.re), df)?;
                store.add(k("b_im"), bt(|z| z.im), df)?;
                store.add(k("c_re"), cm(|z| z.re), df)?;
                store.add(k("c_im"), cm(|z| z.im), df)?;
                store.add(k("d"), row(s.d.iter().copied()), df)?;
            }
            (LtiParams::Lru(s), _) => {
                let (p, q) = (s.p(), s.q());
                let gamma: Vec<f64> = s.abar.iter().map(|a| init::lru_gamma(a.norm())).collect();
                store.add(k("nu_log"), row(s.abar.iter().map(|a| (-a.norm().ln()).ln())), dy)?;
                store.add(k("theta"), row(s.abar.iter().map(|a| a.arg())), dy)?;
                store.add(k("gamma_log"), row(gamma.iter().copied()), dy)?;
                let gt = |f: fn(Complex64) -> f64| {
                    Array2::from_shape_fn((q, p), |(j, i)| f(s.bbar[[i, j]] / gamma[i].exp()))
                };
                let cm = |f: fn(Complex64) -> f64| Array2::from_shape_fn((q, p), |(j, i)| f(s.cbar[[j, i]]));
                store.add(k("b_re"), gt(|z| z.re), df)?;
                store.add(k("b_im"), gt(|z| z.im), df)?;
                store.add(k("c_re"), cm(|z| z.re), df)?;
                store.add(k("c_im"), cm(|z| z.im), df)?;
                store.add(k("d"), row(s.dbar.iter().copied()), df)?;
            }
            (LtiParams::Siso(_), k) => {
                return Err(SsmError::InvalidArgument(format!("{k} is not a single-input kind")));
            }
        }
        Ok(())
    }

    pub fn from_store(cfg: &CoreConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.get(&key(prefix, n)).map(|v| v.to_owned());
        let cplx = |re: &Array2<f64>, im: &Array2<f64>| Array2::from_shape_fn(re.dim(), |i| Complex64::new(re[i], im[i]));
        let kind = cfg.kind;
        let params = match kind {
            ModelKind::S4d | ModelKind::S4 => {
                let (q, h) = (cfg.q, cfg.p / 2);
                // Both layouts index (channel, n) as channel·h + n.
                let flat = |n: &str| -> Result<Vec<f64>> { Ok(get(n)?.iter().copied().collect()) };
                let (lre, lim) = (flat("lambda_re_log")?, flat("lambda_im")?);
                let (bre, bim, cre, cim) = (flat("b_re")?, flat("b_im")?, flat("c_re")?, flat("c_im")?);
                let d = flat("d")?;
                let delta = store.scalar(&key(prefix, "log_delta"))?.exp();
                if lre.len() != q * h || d.len() != q {
                    return Err(SsmError::shape("LtiModel::from_store", q * h, lre.len()));
                }
                let lowrank = if kind == ModelKind::S4 {
                    Some((flat("r_re")?, flat("r_im")?, flat("s_re")?, flat("s_im")?))
                } else {
                    None
                };
                let chans = (0..q)
                    .map(|c| {
                        let idx = |n: usize| c * h + n;
                        let half = |re: &[f64], im: &[f64]| -> Vec<Complex64> {
                            (0..h).map(|n| Complex64::new(re[idx(n)], im[idx(n)])).collect()
                        };
                        let lam: Vec<Complex64> = (0..h).map(|n| Complex64::new(-lre[idx(n)].exp(), lim[idx(n)])).collect();
                        let b = mirror(&half(&bre, &bim)).insert_axis(ndarray::Axis(1));
                        let cm = mirror(&half(&cre, &cim)).insert_axis(ndarray::Axis(0));
                        let sys = ContinuousSystem::new(mirror(&lam), b, cm, Array1::from_elem(1, d[c]), delta)?
                            .with_stable(true)?;
                        match &lowrank {
                            Some((rre, rim, sre, sim)) => {
                                sys.with_low_rank(mirror(&half(rre, rim)), mirror(&half(sre, sim)))
                            }
                            None => Ok(sys),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                LtiParams::Siso(chans)
            }
            ModelKind::S5 => {
                let lre = get("lambda_re_log")?;
                let lim = get("lambda_im")?;
                let lam: Vec<Complex64> = lre.iter().zip(lim.iter()).map(|(r, i)| Complex64::new(-r.exp(), *i)).collect();
                let bt = cplx(&get("b_re")?, &get("b_im")?);
                let cm = cplx(&get("c_re")?, &get("c_im")?);
                let (q, h) = bt.dim();
                let b = Array2::from_shape_fn((2 * h, q), |(i, j)| if i < h { bt[[j, i]] } else { bt[[j, i - h]].conj() });
                let c = Array2::from_shape_fn((q, 2 * h), |(j, i)| if i < h { cm[[j, i]] } else { cm[[j, i - h]].conj() });
                let d = get("d")?.row(0).to_owned();
                let delta = store.scalar(&key(prefix, "log_delta"))?.exp();
                LtiParams::Mimo(ContinuousSystem::new(mirror(&lam), b, c, d, delta)?.with_stable(true)?)
            }
            ModelKind::Lru => {
                let nu = get("nu_log")?;
                let theta = get("theta")?;
                let gamma = get("gamma_log")?;
                let abar: Array1<Complex64> =
                    nu.iter().zip(theta.iter()).map(|(&n, &t)| init::lru_abar(n, t)).collect();
                let gt = cplx(&get("b_re")?, &get("b_im")?);
                let (q, p) = gt.dim();
                let bbar = Array2::from_shape_fn((p, q), |(i, j)| gt[[j, i]] * gamma[[0, i]].exp());
                let cbar = cplx(&get("c_re")?, &get("c_im")?);
                let d = get("d")?.row(0).to_owned();
                LtiParams::Lru(DiscreteSystem::new(abar, bbar, cbar, d)?.with_memory(true))
            }
            k => return Err(SsmError::InvalidArgument(format!("{k} is not time-invariant"))),
        };
        Ok(LtiModel {
            kind,
            params,
            discretization: match kind {
                ModelKind::S4 => Discretization::Bilinear,
                ModelKind::S5 => cfg.discretization,
                _ => Discretization::Zoh,
            },
        })
    }
}

/// Stack single-channel systems into one block-diagonal system.
fn block_diagonal(parts: &[DiscreteSystem]) -> Result<DiscreteSystem> {
    let q = parts.len();
    let p = parts[0].p();
    let mut abar = Array1::zeros(p * q);
    let mut bbar = Array2::zeros((p * q, q));
    let mut cbar = Array2::zeros((q, p * q));
    let mut d = Array1::zeros(q);
    for (c, s) in parts.iter().enumerate() {
        if s.p() != p || s.q() != 1 {
            return Err(SsmError::shape("block_diagonal", format!("{p}x1"), format!("{}x{}", s.p(), s.q())));
        }
        for i in 0..p {
            abar[c * p + i] = s.abar[i];
            bbar[[c * p + i, c]] = s.bbar[[i, 0]];
            cbar[[c, c * p + i]] = s.cbar[[0, i]];
        }
        d[c] = s.dbar[0];
    }
    DiscreteSystem::new(abar, bbar, cbar, d)
}

/// Direct forward of an LTI core on one sequence.
pub fn lti_forward(model: &LtiModel, u: &Sequence, mode: ExecMode, opts: ExecOptions) -> Result<Sequence> {
    if u.channels() != model.q() {
        return Err(SsmError::shape("lti_forward input channels", model.q(), u.channels()));
    }
    if model.kind != ModelKind::S4 {
        return run_lti(&model.discrete()?, u, mode, opts);
    }
    if mode == ExecMode::Scan {
        return Err(SsmError::InvalidArgument("S4's transition is not diagonal; use conv or recurrent".into()));
    }
    let mut y = Array2::zeros((u.len(), model.q()));
    for (c, sys) in model.dplr()?.iter().enumerate() {
        let uc = Sequence::new(u.column(c).to_owned().insert_axis(ndarray::Axis(1)))?;
        let yc = match mode {
            ExecMode::Conv => sys.run_convolution(&uc)?,
            _ => sys.run_recurrent(&uc)?,
        };
        y.column_mut(c).assign(&yc.column(0));
    }
    Sequence::new(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::testutil::{max_rel_diff, random_input};
    use crate::models::CoreModel;
    use rand::SeedableRng;

    fn lti(kind: ModelKind, p: usize, q: usize, seed: u64) -> LtiModel {
        let mut cfg = CoreConfig::new(kind, p, q);
        cfg.delta_range = (1e-2, 1e-1);
        match CoreModel::init(&cfg, seed).unwrap() {
            CoreModel::Lti(m) => m,
            _ => unreachable!(),
        }
    }

    #[test]
    fn engines_agree_for_every_lti_kind() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for kind in [ModelKind::S4, ModelKind::S4d, ModelKind::S5, ModelKind::Lru] {
            let m = lti(kind, 8, 3, 1);
            let u = random_input(&mut r, 200, 3);
            let rec = lti_forward(&m, &u, ExecMode::Recurrent, ExecOptions::default()).unwrap();
            let conv = lti_forward(&m, &u, ExecMode::Conv, ExecOptions::default()).unwrap();
            assert!(max_rel_diff(&rec, &conv) < 1e-8, "{kind}");
            if kind != ModelKind::S4 {
                let scan = lti_forward(&m, &u, ExecMode::Scan, ExecOptions::default()).unwrap();
                assert!(max_rel_diff(&rec, &scan) < 1e-8, "{kind}");
            } else {
                assert!(lti_forward(&m, &u, ExecMode::Scan, ExecOptions::default()).is_err());
            }
        }
    }

    #[test]
    fn superposition() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for kind in [ModelKind::S4, ModelKind::S4d, ModelKind::S5, ModelKind::Lru] {
            let m = lti(kind, 4, 2, 2);
            let (u1, u2) = (random_input(&mut r, 50, 2), random_input(&mut r, 50, 2));
            let sum = Sequence::new(&u1.data() * 2.0 - &u2.data()).unwrap();
            let f = |u: &Sequence| lti_forward(&m, u, ExecMode::Recurrent, ExecOptions::default()).unwrap();
            let lin = Sequence::new(&f(&u1).data() * 2.0 - &f(&u2).data()).unwrap();
            assert!(max_rel_diff(&f(&sum), &lin) < 1e-10, "{kind}");
        }
    }

    #[test]
    fn s4d_equals_s5_built_from_its_channel() {
        let m = lti(ModelKind::S4d, 8, 1, 3);
        let LtiParams::Siso(chans) = &m.params else { unreachable!() };
        let s5 = LtiModel {
            kind: ModelKind::S5,
            params: LtiParams::Mimo(chans[0].clone()),
            discretization: Discretization::Zoh,
        };
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let u = random_input(&mut r, 64, 1);
        let a = lti_forward(&m, &u, ExecMode::Scan, ExecOptions::default()).unwrap();
        let b = lti_forward(&s5, &u, ExecMode::Scan, ExecOptions::default()).unwrap();
        assert!(max_rel_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn siso_channels_share_delta() {
        let m = lti(ModelKind::S4d, 4, 3, 0);
        let LtiParams::Siso(chans) = &m.params else { unreachable!() };
        assert!(chans.iter().all(|c| c.delta == chans[0].delta));
        assert_ne!(chans[0].b, chans[1].b);
    }

    #[test]
    fn store_round_trip() {
        for (kind, disc) in [
            (ModelKind::S4, Discretization::Bilinear),
            (ModelKind::S4d, Discretization::Zoh),
            (ModelKind::S5, Discretization::Bilinear),
            (ModelKind::Lru, Discretization::Zoh),
        ] {
            let mut cfg = CoreConfig::new(kind, 6, 2);
            cfg.discretization = disc;
            let m = CoreModel::init(&cfg, 4).unwrap();
            let mut store = ParamStore::new();
            m.register(&mut store, "core").unwrap();
            let back = CoreModel::from_store(&cfg, &store, "core").unwrap();
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
            let u = random_input(&mut r, 40, 2);
            let mode = ExecMode::Recurrent;
            let a = m.forward(&u, mode, ExecOptions::default()).unwrap();
            let b = back.forward(&u, mode, ExecOptions::default()).unwrap();
            assert!(max_rel_diff(&a, &b) < 1e-12, "{kind}");
        }
    }

    #[test]
    fn wrong_channel_count() {
        let m = lti(ModelKind::S5, 4, 2, 0);
        let u = Sequence::zeros(5, 3);
        assert!(matches!(
            lti_forward(&m, &u, ExecMode::Scan, ExecOptions::default()),
            Err(SsmError::Shape { .. })
        ));
    }
}
