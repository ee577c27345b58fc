use rand::seq::index::sample;

use super::params::ParamStore;
use crate::error::Result;
use crate::rng;

/// Relative errors below this denominator are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Segment and in-segment index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
}

/// `|a − f| / max(|a|, |f|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the gradient held in `store` against central differences of
/// `loss`. Checks every coordinate, or `max_coords` sampled ones.
pub fn finite_diff_check(
    loss: impl Fn(&ParamStore) -> Result<f64>,
    store: &ParamStore,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheck> {
    assert!(eps > 0.0, "eps must be positive");
    let n = store.len();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < n => {
            let mut r = rng::substream(n as u64, "gradcheck");
            let mut v = sample(&mut r, n, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };
    let mut probe = store.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: coords.len(),
    };
    for &i in &coords {
        let x0 = probe.values()[i];
        probe.values_mut()[i] = x0 + eps;
        let fp = loss(&probe)?;
        probe.values_mut()[i] = x0 - eps;
        let fm = loss(&probe)?;
        probe.values_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(store.grads()[i], numeric);
        if err > worst.max_rel_error || worst.worst.0.is_empty() {
            worst.max_rel_error = err;
            worst.worst = store.locate(i);
        }
    }
    Ok(worst)
}
