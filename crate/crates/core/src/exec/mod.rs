//! Execution engines for the diagonal linear recurrence.
//!
//! All three engines share one timing convention: the state is updated
//! before it is read out, so
//! `y(k) = Σ_{τ≤k} Re(C̄ āᵏ⁻ᵗ B̄ u(τ)) + D̄ u(k)` for every engine.

mod conv;
mod recurrent;
mod scan;

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use conv::{causal_conv_fft, convolve_with_kernel, fft_len, materialize_kernel, run_convolution, run_convolution_with};
pub use recurrent::{run_recurrent, run_recurrent_from, step};
pub use scan::{combine, scan, scan_with, ScanElement, ScanScalar, ScanStats};

use crate::error::{Result, SsmError};
use crate::system::{DiscreteSystem, Sequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Recurrent,
    Scan,
    Conv,
}

impl ExecMode {
    pub const ALL: [ExecMode; 3] = [ExecMode::Recurrent, ExecMode::Scan, ExecMode::Conv];

    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Recurrent => "recurrent",
            ExecMode::Scan => "scan",
            ExecMode::Conv => "conv",
        }
    }
}

impl FromStr for ExecMode {
    type Err = SsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" | "rec" => Ok(ExecMode::Recurrent),
            "scan" => Ok(ExecMode::Scan),
            "conv" | "convolution" => Ok(ExecMode::Conv),
            other => Err(SsmError::InvalidArgument(format!("unknown exec mode `{other}`"))),
        }
    }
}

/// Worker count for the data-parallel engines. Results are independent
/// of the worker count up to floating-point reassociation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecOptions {
    pub workers: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { workers: 1 }
    }
}

/// Shared rayon pool per worker count; `None` means run inline.
pub(crate) fn pool(workers: usize) -> Option<Arc<rayon::ThreadPool>> {
    if workers <= 1 {
        return None;
    }
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().expect("pool registry poisoned");
    let entry = pools.entry(workers).or_insert_with(|| {
        Arc::new(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool"),
        )
    });
    Some(entry.clone())
}

/// Run `f` inside the pool for `workers`, or inline.
pub(crate) fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    match pool(workers) {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// `B̄ u(k)` for every step, parallel over time.
pub fn drive_lti(sys: &DiscreteSystem, u: &Sequence, workers: usize) -> Result<Array2<Complex64>> {
    if u.channels() != sys.q() {
        return Err(SsmError::shape("drive", sys.q(), u.channels()));
    }
    let (p, q) = (sys.p(), sys.q());
    let mut out = Array2::<Complex64>::zeros((u.len(), p));
    let ud = u.data();
    let fill = |(k, mut row): (usize, ndarray::ArrayViewMut1<'_, Complex64>)| {
        let uk = ud.row(k);
        for i in 0..p {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..q {
                acc += sys.bbar[[i, j]] * uk[j];
            }
            row[i] = acc;
        }
    };
    if workers > 1 {
        with_workers(workers, || {
            out.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .with_min_len(256)
                .for_each(fill)
        });
    } else {
        out.axis_iter_mut(Axis(0)).enumerate().for_each(fill);
    }
    Ok(out)
}

/// `Re(C̄ x(k)) + D̄ u(k)` for every step, parallel over time.
pub fn readout_lti(sys: &DiscreteSystem, states: &Array2<Complex64>, u: &Sequence, workers: usize) -> Result<Sequence> {
    let (p, q) = (sys.p(), sys.q());
    let mut y = Array2::<f64>::zeros((u.len(), q));
    let ud = u.data();
    let fill = |(k, mut row): (usize, ndarray::ArrayViewMut1<'_, f64>)| {
        let xk = states.row(k);
        for o in 0..q {
            let mut acc = 0.0;
            for i in 0..p {
                let c = sys.cbar[[o, i]];
                acc += c.re * xk[i].re - c.im * xk[i].im;
            }
            row[o] = acc + sys.dbar[o] * ud[[k, o]];
        }
    };
    if workers > 1 {
        with_workers(workers, || {
            y.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .with_min_len(256)
                .for_each(fill)
        });
    } else {
        y.axis_iter_mut(Axis(0)).enumerate().for_each(fill);
    }
    if let Some(k) = states
        .axis_iter(Axis(0))
        .position(|r| r.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()))
    {
        return Err(SsmError::Divergence { step: k });
    }
    Sequence::new(y)
}

/// Output of an LTI system computed through the parallel scan.
pub fn run_scan(sys: &DiscreteSystem, u: &Sequence, opts: ExecOptions) -> Result<Sequence> {
    let drive = drive_lti(sys, u, opts.workers)?;
    let abar = sys.abar.view().insert_axis(Axis(0));
    let (states, _) = scan_with(abar, drive.view(), opts.workers)?;
    readout_lti(sys, &states, u, opts.workers)
}

/// Dispatch on `mode`.
pub fn run_lti(sys: &DiscreteSystem, u: &Sequence, mode: ExecMode, opts: ExecOptions) -> Result<Sequence> {
    match mode {
        ExecMode::Recurrent => run_recurrent(sys, u),
        ExecMode::Scan => run_scan(sys, u, opts),
        ExecMode::Conv => run_convolution_with(sys, u, opts),
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn three_engines_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for &t in &[8usize, 257, 1024] {
            for _ in 0..5 {
                let sys = random_system(&mut rng, 16, 4, 0.999);
                let u = random_input(&mut rng, t, 4);
                let rec = run_recurrent(&sys, &u).unwrap();
                let sc = run_scan(&sys, &u, ExecOptions::default()).unwrap();
                let cv = run_convolution(&sys, &u).unwrap();
                assert!(max_rel_diff(&rec, &sc) < 1e-10);
                assert!(max_rel_diff(&rec, &cv) < 1e-8);
            }
        }
    }

    #[test]
    fn scan_output_independent_of_workers() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sys = random_system(&mut rng, 8, 2, 0.99);
        let u = random_input(&mut rng, 300, 2);
        let one = run_scan(&sys, &u, ExecOptions { workers: 1 }).unwrap();
        let four = run_scan(&sys, &u, ExecOptions { workers: 4 }).unwrap();
        assert!(max_rel_diff(&one, &four) <= 1e-10);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("scan".parse::<ExecMode>().unwrap(), ExecMode::Scan);
        assert!("fft".parse::<ExecMode>().is_err());
    }
}
