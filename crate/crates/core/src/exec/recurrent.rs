use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;

use crate::error::{Result, SsmError};
use crate::system::{DiscreteSystem, Sequence};

/// One step: `x' = ā ⊙ x + B̄u`, `y = Re(C̄x') + D̄ ⊙ u`.
pub fn step(
    sys: &DiscreteSystem,
    x: ArrayView1<'_, Complex64>,
    u: ArrayView1<'_, f64>,
) -> Result<(Array1<Complex64>, Array1<f64>)> {
    if x.len() != sys.p() {
        return Err(SsmError::shape("step state", sys.p(), x.len()));
    }
    if u.len() != sys.q() {
        return Err(SsmError::shape("step input", sys.q(), u.len()));
    }
    let mut next = Array1::zeros(sys.p());
    let mut y = Array1::zeros(sys.q());
    advance(sys, x, u, next.view_mut(), y.view_mut());
    Ok((next, y))
}

#[inline]
fn advance(
    sys: &DiscreteSystem,
    x: ArrayView1<'_, Complex64>,
    u: ArrayView1<'_, f64>,
    mut next: ndarray::ArrayViewMut1<'_, Complex64>,
    mut y: ndarray::ArrayViewMut1<'_, f64>,
) {
    let (p, q) = (sys.p(), sys.q());
    for i in 0..p {
        let mut acc = sys.abar[i] * x[i];
        for j in 0..q {
            acc += sys.bbar[[i, j]] * u[j];
        }
        next[i] = acc;
    }
    for o in 0..q {
        let mut acc = 0.0;
        for i in 0..p {
            let c = sys.cbar[[o, i]];
            acc += c.re * next[i].re - c.im * next[i].im;
        }
        y[o] = acc + sys.dbar[o] * u[o];
    }
}

/// Sequential recurrence from zero initial state.
pub fn run_recurrent(sys: &DiscreteSystem, u: &Sequence) -> Result<Sequence> {
    run_recurrent_from(sys, u, None).map(|(y, _)| y)
}

/// Sequential recurrence from `x0`; also returns the final state.
pub fn run_recurrent_from(
    sys: &DiscreteSystem,
    u: &Sequence,
    x0: Option<ArrayView1<'_, Complex64>>,
) -> Result<(Sequence, Array1<Complex64>)> {
    if u.channels() != sys.q() {
        return Err(SsmError::shape("run_recurrent input", sys.q(), u.channels()));
    }
    let mut x = match x0 {
        Some(x0) if x0.len() != sys.p() => return Err(SsmError::shape("run_recurrent x0", sys.p(), x0.len())),
        Some(x0) => x0.to_owned(),
        None => Array1::zeros(sys.p()),
    };
    let mut next = Array1::zeros(sys.p());
    let mut y = Array2::zeros((u.len(), sys.q()));
    for k in 0..u.len() {
        advance(sys, x.view(), u.step(k), next.view_mut(), y.row_mut(k));
        if next.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(SsmError::Divergence { step: k });
        }
        std::mem::swap(&mut x, &mut next);
    }
    Ok((Sequence::new(y)?, x))
}
