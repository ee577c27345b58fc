//! Reverse-mode gradients, the optimizer and the training loop.

mod adam;
pub mod adjoint;
mod gradcheck;
mod params;
pub mod tape;
pub mod train;

pub use adam::{AdamConfig, AdamState, StepInfo};
pub use adjoint::scan_backward;
pub use gradcheck::{finite_diff_check, relative_error, GradCheck, REL_FLOOR};
pub use params::{ParamGroup, ParamStore, Segment};
pub use tape::{Gradients, Tape, Unary, Var};

use crate::error::{Result, SsmError};

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(SsmError::LabelOutOfRange { label, n_classes: logits.len() });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(SsmError::InvalidArgument("non-finite logits".into()));
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `softmax(logits) − onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(SsmError::LabelOutOfRange { label, n_classes: logits.len() });
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    let mut g: Vec<f64> = logits.iter().map(|x| (x - m).exp() / z).collect();
    g[label] -= 1.0;
    Ok(g)
}
