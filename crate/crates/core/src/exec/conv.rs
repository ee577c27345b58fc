use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::{with_workers, ExecOptions};
use crate::error::{Result, SsmError};
use crate::system::{DiscreteSystem, Sequence};

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn RealToComplex<f64>>, Arc<dyn ComplexToReal<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Inverse real FFT. The DC and Nyquist bins of a real signal's spectrum are
/// real; their imaginary parts are dropped so non-finite data propagates as
/// NaN instead of being rejected.
fn inverse(inv: &dyn ComplexToReal<f64>, spec: &mut [Complex64], out: &mut [f64]) {
    let last = spec.len() - 1;
    spec[0].im = 0.0;
    spec[last].im = 0.0;
    inv.process(spec, out).expect("ifft");
}

/// Smallest power of two that holds a linear convolution of two length-`t` signals.
pub fn fft_len(t: usize) -> usize {
    (2 * t.max(1)).next_power_of_two()
}

/// `K[j, o, i] = Re(Σₙ C̄[o,n] āₙʲ B̄[n,i])` for `j < len`.
pub fn materialize_kernel(sys: &DiscreteSystem, len: usize, workers: usize) -> Array3<f64> {
    let (p, q) = (sys.p(), sys.q());
    let mut k = Array3::<f64>::zeros((len, q, q));
    // cb[o, i, n] = C̄[o,n] B̄[n,i]
    let mut cb = vec![Complex64::new(0.0, 0.0); q * q * p];
    for o in 0..q {
        for i in 0..q {
            for n in 0..p {
                cb[(o * q + i) * p + n] = sys.cbar[[o, n]] * sys.bbar[[n, i]];
            }
        }
    }
    const CHUNK: usize = 256;
    let fill = |(c, mut block): (usize, ndarray::ArrayViewMut3<'_, f64>)| {
        let start = c * CHUNK;
        let mut pw: Vec<Complex64> = sys.abar.iter().map(|a| a.powu(start as u32)).collect();
        for mut kj in block.outer_iter_mut() {
            for o in 0..q {
                for i in 0..q {
                    let base = (o * q + i) * p;
                    let mut acc = 0.0;
                    for n in 0..p {
                        let z = cb[base + n];
                        acc += z.re * pw[n].re - z.im * pw[n].im;
                    }
                    kj[[o, i]] = acc;
                }
            }
            for (w, a) in pw.iter_mut().zip(sys.abar.iter()) {
                *w *= a;
            }
        }
    };
    if workers > 1 {
        with_workers(workers, || {
            k.axis_chunks_iter_mut(Axis(0), CHUNK).into_par_iter().enumerate().for_each(fill)
        });
    } else {
        k.axis_chunks_iter_mut(Axis(0), CHUNK).enumerate().for_each(fill);
    }
    k
}

/// Output of an LTI system through FFT convolution with its kernel.
pub fn run_convolution(sys: &DiscreteSystem, u: &Sequence) -> Result<Sequence> {
    run_convolution_with(sys, u, ExecOptions::default())
}

pub fn run_convolution_with(sys: &DiscreteSystem, u: &Sequence, opts: ExecOptions) -> Result<Sequence> {
    if u.channels() != sys.q() {
        return Err(SsmError::shape("run_convolution input", sys.q(), u.channels()));
    }
    let kernel = materialize_kernel(sys, u.len(), opts.workers);
    if kernel.iter().any(|v| !v.is_finite()) {
        let step = kernel.axis_iter(Axis(0)).position(|kj| kj.iter().any(|v| !v.is_finite())).unwrap_or(0);
        return Err(SsmError::Divergence { step });
    }
    convolve_with_kernel(&kernel, &sys.dbar, u)
}

/// `y_o = Σᵢ K_{·,o,i} ∗ uᵢ + d_o u_o` with a causal kernel of shape `T×q×q`.
pub fn convolve_with_kernel(kernel: &Array3<f64>, d: &Array1<f64>, u: &Sequence) -> Result<Sequence> {
    let (kt, qo, qi) = kernel.dim();
    let t = u.len();
    if qo != qi || qi != u.channels() {
        return Err(SsmError::shape("kernel channels", u.channels(), qi));
    }
    if d.len() != qo {
        return Err(SsmError::shape("feedthrough", qo, d.len()));
    }
    if kt < t {
        return Err(SsmError::shape("kernel length", t, kt));
    }
    let q = qo;
    let n = fft_len(t);
    let (fwd, inv) = plans(n);
    let bins = n / 2 + 1;
    let mut buf = vec![0.0; n];
    let mut spec_u = vec![vec![Complex64::new(0.0, 0.0); bins]; q];
    for (i, spec) in spec_u.iter_mut().enumerate() {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..t {
            buf[k] = u.data()[[k, i]];
        }
        fwd.process(&mut buf, spec).expect("fft");
    }
    let mut spec_k = vec![Complex64::new(0.0, 0.0); bins];
    let mut acc = vec![Complex64::new(0.0, 0.0); bins];
    let mut y = Array2::<f64>::zeros((t, q));
    for o in 0..q {
        acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for i in 0..q {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..t {
                buf[k] = kernel[[k, o, i]];
            }
            fwd.process(&mut buf, &mut spec_k).expect("fft");
            for ((a, s), x) in acc.iter_mut().zip(&spec_k).zip(&spec_u[i]) {
                *a += s * x;
            }
        }
        inverse(inv.as_ref(), &mut acc, &mut buf);
        let scale = 1.0 / n as f64;
        for k in 0..t {
            y[[k, o]] = buf[k] * scale + d[o] * u.data()[[k, o]];
        }
    }
    Sequence::new(y)
}

/// Depthwise causal convolution of stacked sequences.
///
/// `u` holds `B` sequences of `seq_len` rows each; channel `c` of every
/// sequence is convolved with column `c` of `kernel` (length ≥ `seq_len`).
pub fn causal_conv_fft(kernel: ArrayView2<'_, f64>, u: ArrayView2<'_, f64>, seq_len: usize) -> Array2<f64> {
    let (rows, ch) = u.dim();
    assert!(seq_len > 0 && rows % seq_len == 0, "rows must be a multiple of seq_len");
    assert_eq!(kernel.ncols(), ch, "kernel channels");
    let klen = kernel.nrows().min(seq_len);
    let n = fft_len(seq_len);
    let (fwd, inv) = plans(n);
    let bins = n / 2 + 1;
    let mut buf = vec![0.0; n];
    let mut spec_k = vec![vec![Complex64::new(0.0, 0.0); bins]; ch];
    for (c, spec) in spec_k.iter_mut().enumerate() {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..klen {
            buf[k] = kernel[[k, c]];
        }
        fwd.process(&mut buf, spec).expect("fft");
    }
    let mut out = Array2::<f64>::zeros((rows, ch));
    let mut spec = vec![Complex64::new(0.0, 0.0); bins];
    let scale = 1.0 / n as f64;
    for b in 0..rows / seq_len {
        let r0 = b * seq_len;
        for c in 0..ch {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..seq_len {
                buf[k] = u[[r0 + k, c]];
            }
            fwd.process(&mut buf, &mut spec).expect("fft");
            for (s, kk) in spec.iter_mut().zip(&spec_k[c]) {
                *s *= kk;
            }
            inverse(inv.as_ref(), &mut spec, &mut buf);
            for k in 0..seq_len {
                out[[r0 + k, c]] = buf[k] * scale;
            }
        }
    }
    out
}
