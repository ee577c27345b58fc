//! Adjoint of the diagonal recurrence `x(k) = a(k) ⊙ x(k−1) + d(k)`.
//!
//! With upstream gradient `g(k) = ∂L/∂x(k)` the adjoint state obeys the
//! time-reversed recurrence `λ(k) = g(k) + conj(a(k+1)) ⊙ λ(k+1)`, which is
//! evaluated with the same parallel scan as the forward pass. Then
//! `∂L/∂d(k) = λ(k)` and `∂L/∂a(k) = λ(k) ⊙ conj(x(k−1))`.
//!
//! Complex gradients follow the real-pair convention
//! `G = ∂L/∂Re + i·∂L/∂Im`.

use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Result, SsmError};
use crate::exec::{scan_with, ScanScalar};

/// Scalars with a conjugate (identity for reals).
pub trait Conj: ScanScalar {
    fn conj_value(self) -> Self;
}

impl Conj for f64 {
    fn conj_value(self) -> Self {
        self
    }
}

impl Conj for Complex64 {
    fn conj_value(self) -> Self {
        self.conj()
    }
}

/// Gradients of `L` with respect to `a` and `d` given the forward states.
///
/// `a` has one row (shared over time) or `T` rows; the returned `∂L/∂a`
/// has the same number of rows.
pub fn scan_backward<S: Conj>(
    a: ArrayView2<'_, S>,
    x: ArrayView2<'_, S>,
    upstream: ArrayView2<'_, S>,
    workers: usize,
) -> Result<(Array2<S>, Array2<S>)> {
    let (t, p) = x.dim();
    if upstream.dim() != (t, p) {
        return Err(SsmError::shape("scan_backward upstream", format!("{t}x{p}"), format!("{:?}", upstream.dim())));
    }
    if a.ncols() != p || (a.nrows() != 1 && a.nrows() != t) {
        return Err(SsmError::shape("scan_backward coefficients", format!("1x{p} or {t}x{p}"), format!("{:?}", a.dim())));
    }
    // Reversed time s = T−1−k; coefficient at s is conj(a(T−s)).
    let coeff = if a.nrows() == 1 {
        a.mapv(|v| v.conj_value())
    } else {
        let mut c = Array2::from_elem((t, p), S::zero());
        for s_ in 1..t {
            for i in 0..p {
                c[[s_, i]] = a[[t - s_, i]].conj_value();
            }
        }
        c
    };
    let rev_g = upstream.slice(s![..;-1, ..]);
    let (mu, _) = scan_with(coeff.view(), rev_g, workers)?;
    let lam = mu.slice(s![..;-1, ..]).to_owned();
    let mut ga = Array2::from_elem((a.nrows(), p), S::zero());
    for k in 1..t {
        let row = if a.nrows() == 1 { 0 } else { k };
        for i in 0..p {
            ga[[row, i]] = ga[[row, i]] + lam[[k, i]] * x[[k - 1, i]].conj_value();
        }
    }
    Ok((ga, lam))
}
