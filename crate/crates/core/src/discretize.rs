//! Continuous → discrete conversion: bilinear (Tustin), exact (ZOH), the
//! diagonal-plus-low-rank bilinear transform via Sherman–Morrison, and the
//! per-step ZOH used by selective models.
//!
//! The ZOH input matrix is evaluated in its cancelled form
//! `B̄ = Δ·φ₁(Δλ)·B` with `φ₁(z) = (eᶻ − 1)/z`, so `(ΔA)⁻¹(Ā − I)ΔB` never
//! divides by a vanishing `λ`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};
use num_complex::Complex64;

use crate::error::{Result, SsmError};
use crate::system::{ContinuousSystem, DiscreteSystem, Sequence};

/// Below this `|z|` the series for `φ₁` is used.
pub const PHI1_SERIES_RADIUS: f64 = 1e-4;

/// Relative tolerance for a singular bilinear pivot.
pub const PIVOT_TOL: f64 = 1e-12;

/// Scalars that support exact discretization.
pub trait ZohScalar: Copy + Send + Sync + std::ops::Mul<Output = Self> + std::ops::Mul<f64, Output = Self> {
    fn exp(self) -> Self;
    /// `(eᶻ − 1)/z`, continuous at 0.
    fn phi1(self) -> Self;
    fn modulus(self) -> f64;
}

impl ZohScalar for f64 {
    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn phi1(self) -> Self {
        if self.abs() < PHI1_SERIES_RADIUS {
            1.0 + self / 2.0 + self * self / 6.0 + self * self * self / 24.0
        } else {
            self.exp_m1() / self
        }
    }

    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl ZohScalar for Complex64 {
    fn exp(self) -> Self {
        Complex64::exp(self)
    }

    fn phi1(self) -> Self {
        if self.norm() < PHI1_SERIES_RADIUS {
            let z = self;
            Complex64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
        } else {
            // expm1 on the real part keeps precision for small Re(z) with large Im(z).
            let em1 = Complex64::new(
                self.re.exp_m1() * self.im.cos() + (self.im.cos() - 1.0),
                self.re.exp() * self.im.sin(),
            );
            em1 / self
        }
    }

    fn modulus(self) -> f64 {
        self.norm()
    }
}

fn reject_low_rank(sys: &ContinuousSystem, what: &str) -> Result<()> {
    if sys.low_rank.is_some() {
        return Err(SsmError::InvalidArgument(format!(
            "{what} handles diagonal systems only; use bilinear_dplr for a low-rank term"
        )));
    }
    Ok(())
}

/// Bilinear (Tustin) discretization of a diagonal system.
pub fn bilinear(sys: &ContinuousSystem) -> Result<DiscreteSystem> {
    reject_low_rank(sys, "bilinear")?;
    let half = sys.delta / 2.0;
    let mut inv_pivot = Array1::zeros(sys.p());
    for (i, &l) in sys.lambda.iter().enumerate() {
        let pivot = Complex64::new(1.0, 0.0) - l * half;
        let scale = 1.0_f64.max((l * half).norm());
        if pivot.norm() < PIVOT_TOL * scale {
            return Err(SsmError::SingularPivot {
                index: i,
                magnitude: pivot.norm(),
            });
        }
        inv_pivot[i] = pivot.inv();
    }
    let abar = sys
        .lambda
        .iter()
        .zip(inv_pivot.iter())
        .map(|(&l, &ip)| (Complex64::new(1.0, 0.0) + l * half) * ip)
        .collect::<Array1<_>>();
    let mut bbar = sys.b.clone();
    for (mut row, &ip) in bbar.axis_iter_mut(Axis(0)).zip(inv_pivot.iter()) {
        row.mapv_inplace(|b| b * ip * sys.delta);
    }
    DiscreteSystem::new(abar, bbar, sys.c.clone(), sys.d.clone())
}

/// Exact (zero-order hold) discretization of a diagonal system.
pub fn zoh(sys: &ContinuousSystem) -> Result<DiscreteSystem> {
    reject_low_rank(sys, "zoh")?;
    let dl: Vec<Complex64> = sys.lambda.iter().map(|&l| l * sys.delta).collect();
    let abar = dl.iter().map(|z| z.exp()).collect::<Array1<_>>();
    let mut bbar = sys.b.clone();
    for (mut row, z) in bbar.axis_iter_mut(Axis(0)).zip(dl.iter()) {
        let g = z.phi1() * sys.delta;
        row.mapv_inplace(|b| b * g);
    }
    DiscreteSystem::new(abar, bbar, sys.c.clone(), sys.d.clone())
}

/// Per-step ZOH streams: `āₖ = exp(Δₖλ)`, `B̄ₖ = Δₖ·φ₁(Δₖλ)·Bₖ`.
#[derive(Clone, Debug)]
pub struct TimeVaryingZoh<S> {
    /// `T × p`
    pub abar: Array2<S>,
    /// `T × p × q`
    pub bbar: Array3<S>,
}

impl<S: ZohScalar + num_traits::Zero + std::ops::Add<Output = S>> TimeVaryingZoh<S> {
    /// `B̄ₖ u(k)` for every step.
    pub fn drive(&self, u: &Sequence) -> Result<Array2<S>> {
        let (t, p, q) = self.bbar.dim();
        if u.len() != t || u.channels() != q {
            return Err(SsmError::shape("TimeVaryingZoh::drive", format!("{t}x{q}"), format!("{}x{}", u.len(), u.channels())));
        }
        let mut out = Array2::from_elem((t, p), S::zero());
        for k in 0..t {
            let uk = u.step(k);
            for i in 0..p {
                let mut acc = S::zero();
                for j in 0..q {
                    acc = acc + self.bbar[[k, i, j]] * uk[j];
                }
                out[[k, i]] = acc;
            }
        }
        Ok(out)
    }
}

pub fn zoh_timevarying<S: ZohScalar>(
    lambda: ArrayView1<'_, S>,
    delta_seq: ArrayView1<'_, f64>,
    b_seq: ArrayView3<'_, S>,
) -> Result<TimeVaryingZoh<S>> {
    let (t, p, q) = b_seq.dim();
    if lambda.len() != p || delta_seq.len() != t {
        return Err(SsmError::shape(
            "zoh_timevarying",
            format!("λ:{p}, Δ:{t}"),
            format!("λ:{}, Δ:{}", lambda.len(), delta_seq.len()),
        ));
    }
    if let Some(k) = delta_seq.iter().position(|d| !(*d > 0.0)) {
        return Err(SsmError::InvalidArgument(format!("Δ_{k} = {} is not positive", delta_seq[k])));
    }
    let mut abar = Array2::from_shape_fn((t, p), |_| lambda[0]);
    let mut bbar = b_seq.to_owned();
    for k in 0..t {
        let dk = delta_seq[k];
        for i in 0..p {
            let z = lambda[i] * dk;
            abar[[k, i]] = z.exp();
            let g = z.phi1() * dk;
            for j in 0..q {
                bbar[[k, i, j]] = bbar[[k, i, j]] * g;
            }
        }
    }
    Ok(TimeVaryingZoh { abar, bbar })
}

/// Bilinear discretization of `A = diag(λ) + r s*`, kept implicit.
///
/// With `M = I − Δ/2·A = Dm − (Δ/2) r s*` and `Dm = diag(1 − Δλ/2)`,
/// Sherman–Morrison gives
/// `M⁻¹w = Dm⁻¹w + (Δ/2)·Dm⁻¹r·(s*Dm⁻¹w) / (1 − (Δ/2)·s*Dm⁻¹r)`,
/// so applying `Ā = M⁻¹(I + Δ/2·A)` costs O(p) and only inverts scalars.
#[derive(Clone, Debug)]
pub struct DplrDiscrete {
    pub lambda: Array1<Complex64>,
    pub r: Array1<Complex64>,
    pub s: Array1<Complex64>,
    pub delta: f64,
    pub bbar: Array2<Complex64>,
    pub c: Array2<Complex64>,
    pub d: Array1<f64>,
    dinv: Array1<Complex64>,
    dinv_r: Array1<Complex64>,
    sm_coef: Complex64,
}

fn dot_conj(s: &Array1<Complex64>, v: ArrayView1<'_, Complex64>) -> Complex64 {
    s.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum()
}

pub fn bilinear_dplr(sys: &ContinuousSystem) -> Result<DplrDiscrete> {
    let p = sys.p();
    let (r, s) = match &sys.low_rank {
        Some(lr) => (lr.r.clone(), lr.s.clone()),
        None => (Array1::zeros(p), Array1::zeros(p)),
    };
    let half = sys.delta / 2.0;
    let mut dinv = Array1::zeros(p);
    for (i, &l) in sys.lambda.iter().enumerate() {
        let pivot = Complex64::new(1.0, 0.0) - l * half;
        if pivot.norm() < PIVOT_TOL * 1.0_f64.max((l * half).norm()) {
            return Err(SsmError::SingularPivot {
                index: i,
                magnitude: pivot.norm(),
            });
        }
        dinv[i] = pivot.inv();
    }
    let dinv_r = &dinv * &r;
    let denom = Complex64::new(1.0, 0.0) - dot_conj(&s, dinv_r.view()) * half;
    let scale = 1.0_f64.max((dot_conj(&s, dinv_r.view()) * half).norm());
    if denom.norm() < PIVOT_TOL * scale {
        return Err(SsmError::DegenerateLowRank {
            channel: 0,
            magnitude: denom.norm(),
        });
    }
    let mut out = DplrDiscrete {
        lambda: sys.lambda.clone(),
        r,
        s,
        delta: sys.delta,
        bbar: Array2::zeros((p, sys.q())),
        c: sys.c.clone(),
        d: sys.d.clone(),
        dinv,
        dinv_r,
        sm_coef: Complex64::new(half, 0.0) / denom,
    };
    let mut bbar = sys.b.mapv(|b| b * sys.delta);
    for mut col in bbar.axis_iter_mut(Axis(1)) {
        let solved = out.apply_minv(col.view());
        col.assign(&solved);
    }
    out.bbar = bbar;
    Ok(out)
}

impl DplrDiscrete {
    pub fn p(&self) -> usize {
        self.lambda.len()
    }

    pub fn q(&self) -> usize {
        self.d.len()
    }

    /// `(I − Δ/2·A)⁻¹ w`
    pub fn apply_minv(&self, w: ArrayView1<'_, Complex64>) -> Array1<Complex64> {
        let dw = &self.dinv * &w;
        let proj = dot_conj(&self.s, dw.view()) * self.sm_coef;
        dw + &self.dinv_r.mapv(|v| v * proj)
    }

    /// `Ā v`
    pub fn apply_abar(&self, v: ArrayView1<'_, Complex64>) -> Array1<Complex64> {
        let half = self.delta / 2.0;
        let sv = dot_conj(&self.s, v) * half;
        let pv = Array1::from_shape_fn(self.p(), |i| v[i] + self.lambda[i] * v[i] * half + self.r[i] * sv);
        self.apply_minv(pv.view())
    }

    /// Materialize `Ā` as a dense matrix (test oracle and eigen analysis).
    pub fn dense_abar(&self) -> Array2<Complex64> {
        let p = self.p();
        let mut out = Array2::zeros((p, p));
        for j in 0..p {
            let mut e = Array1::zeros(p);
            e[j] = Complex64::new(1.0, 0.0);
            out.column_mut(j).assign(&self.apply_abar(e.view()));
        }
        out
    }

    /// Eigenvalues of `Ā`.
    pub fn eigenvalues(&self) -> Vec<Complex64> {
        let p = self.p();
        let dense = self.dense_abar();
        let m = nalgebra::DMatrix::from_fn(p, p, |i, j| dense[[i, j]]);
        // Complex Schur form is upper triangular; its diagonal is the spectrum.
        let (_, t) = nalgebra::Schur::new(m).unpack();
        t.diagonal().iter().copied().collect()
    }

    /// `K_j = Re(C Āʲ B̄)` for `j < len`, shape `len × q × q` (out, in).
    pub fn kernel(&self, len: usize) -> Array3<f64> {
        let q = self.q();
        let mut k = Array3::zeros((len, q, q));
        let mut v = self.bbar.clone();
        for j in 0..len {
            let cv = self.c.dot(&v);
            for o in 0..q {
                for i in 0..q {
                    k[[j, o, i]] = cv[[o, i]].re;
                }
            }
            if j + 1 < len {
                for mut col in v.axis_iter_mut(Axis(1)) {
                    let next = self.apply_abar(col.view());
                    col.assign(&next);
                }
            }
        }
        k
    }

    /// Sequential recurrence `x(k) = Ā x(k−1) + B̄ u(k)`, `y = Re(C x) + D u`.
    pub fn run_recurrent(&self, u: &Sequence) -> Result<Sequence> {
        if u.channels() != self.q() {
            return Err(SsmError::shape("DplrDiscrete::run_recurrent", self.q(), u.channels()));
        }
        let (p, q) = (self.p(), self.q());
        let mut x = Array1::<Complex64>::zeros(p);
        let mut y = Array2::zeros((u.len(), q));
        for k in 0..u.len() {
            let uk = u.step(k);
            let mut nx = self.apply_abar(x.view());
            for i in 0..p {
                for j in 0..q {
                    nx[i] += self.bbar[[i, j]] * uk[j];
                }
            }
            if nx.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(SsmError::Divergence { step: k });
            }
            x = nx;
            for o in 0..q {
                let cx: Complex64 = (0..p).map(|i| self.c[[o, i]] * x[i]).sum();
                y[[k, o]] = cx.re + self.d[o] * uk[o];
            }
        }
        Sequence::new(y)
    }

    pub fn run_convolution(&self, u: &Sequence) -> Result<Sequence> {
        if u.channels() != self.q() {
            return Err(SsmError::shape("DplrDiscrete::run_convolution", self.q(), u.channels()));
        }
        let kernel = self.kernel(u.len());
        crate::exec::convolve_with_kernel(&kernel, &self.d, u)
    }
}
