use std::ops::{Add, Mul};

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;

use super::with_workers;
use crate::error::{Result, SsmError};

/// Scalar type the scan can compose.
pub trait ScanScalar: Copy + Send + Sync + Add<Output = Self> + Mul<Output = Self> + 'static {
    fn zero() -> Self;
    fn one() -> Self;
    fn is_finite_value(self) -> bool;
}

impl ScanScalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl ScanScalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn is_finite_value(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Affine map `x ↦ a x + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement<S> {
    pub a: S,
    pub b: S,
}

impl<S: ScanScalar> ScanElement<S> {
    pub fn new(a: S, b: S) -> Self {
        ScanElement { a, b }
    }

    pub fn identity() -> Self {
        ScanElement { a: S::one(), b: S::zero() }
    }
}

/// `e1` then `e2`: `(a₂a₁, a₂b₁ + b₂)`.
#[inline]
pub fn combine<S: ScanScalar>(e1: ScanElement<S>, e2: ScanElement<S>) -> ScanElement<S> {
    ScanElement { a: e2.a * e1.a, b: e2.a * e1.b + e2.b }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    /// Element-level combines, counted once per time step regardless of state width.
    pub combines: usize,
    pub levels: usize,
}

/// Inclusive scan of a list of elements.
pub fn scan<S: ScanScalar>(elements: &[ScanElement<S>]) -> Vec<ScanElement<S>> {
    let t = elements.len();
    if t == 0 {
        return Vec::new();
    }
    let mut a: Vec<S> = elements.iter().map(|e| e.a).collect();
    let mut b: Vec<S> = elements.iter().map(|e| e.b).collect();
    brent_kung(&mut a, &mut b, t, 1, 1);
    a.into_iter().zip(b).map(|(a, b)| ScanElement { a, b }).collect()
}

/// States `x(k) = a(k) x(k−1) + b(k)` with `x(−1) = 0`.
///
/// `a` has one row (time-invariant) or `T` rows; `b` has `T` rows.
pub fn scan_with<S: ScanScalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>, workers: usize) -> Result<(Array2<S>, ScanStats)> {
    let (t, p) = b.dim();
    if a.ncols() != p {
        return Err(SsmError::shape("scan state width", p, a.ncols()));
    }
    if a.nrows() != 1 && a.nrows() != t {
        return Err(SsmError::shape("scan coefficient rows", t, a.nrows()));
    }
    if t == 0 {
        return Ok((Array2::from_elem((0, p), S::zero()), ScanStats::default()));
    }
    let mut av: Vec<S> = if a.nrows() == 1 {
        let row = a.row(0);
        (0..t).flat_map(|_| row.iter().copied()).collect()
    } else {
        a.iter().copied().collect()
    };
    let mut bv: Vec<S> = b.iter().copied().collect();
    let stats = brent_kung(&mut av, &mut bv, t, p, workers.max(1));
    if let Some(idx) = bv.iter().position(|z| !z.is_finite_value()) {
        return Err(SsmError::Divergence { step: idx / p.max(1) });
    }
    let states = Array2::from_shape_vec((t, p), bv).expect("scan buffer shape");
    Ok((states, stats))
}

/// Fold row `d−1` into row `2d−1` for every `2d`-row chunk of the slices.
fn sweep<S: ScanScalar>(a: &mut [S], b: &mut [S], d: usize, p: usize, parallel: bool) -> usize {
    let chunk = 2 * d * p;
    let body = |(ac, bc): (&mut [S], &mut [S])| {
        let (left, right) = ((d - 1) * p, (2 * d - 1) * p);
        for i in 0..p {
            let (al, bl) = (ac[left + i], bc[left + i]);
            let ar = ac[right + i];
            ac[right + i] = ar * al;
            bc[right + i] = ar * bl + bc[right + i];
        }
    };
    let n = a.len() / chunk;
    if parallel && n > 1 {
        a.par_chunks_exact_mut(chunk).zip(b.par_chunks_exact_mut(chunk)).for_each(body);
    } else {
        a.chunks_exact_mut(chunk).zip(b.chunks_exact_mut(chunk)).for_each(body);
    }
    n
}

/// In-place Brent–Kung inclusive scan over `t` rows of width `p`.
///
/// Rows beyond `t` act as identity and are never materialized, so the
/// total combine count stays below `2t`.
fn brent_kung<S: ScanScalar>(a: &mut [S], b: &mut [S], t: usize, p: usize, workers: usize) -> ScanStats {
    let parallel = workers > 1;
    with_workers(workers, || {
        let mut stats = ScanStats::default();
        let mut d = 1;
        while 2 * d <= t {
            stats.combines += sweep(a, b, d, p, parallel);
            stats.levels += 1;
            d *= 2;
        }
        while d >= 1 {
            if d * p < a.len() {
                let (_, at) = a.split_at_mut(d * p);
                let (_, bt) = b.split_at_mut(d * p);
                let n = sweep(at, bt, d, p, parallel);
                if n > 0 {
                    stats.combines += n;
                    stats.levels += 1;
                }
            }
            d /= 2;
        }
        stats
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sequential<S: ScanScalar>(a: &[S], b: &[S]) -> Vec<S> {
        let mut x = S::zero();
        a.iter()
            .zip(b)
            .map(|(&ak, &bk)| {
                x = ak * x + bk;
                x
            })
            .collect()
    }

    #[test]
    fn combine_examples() {
        let e = ScanElement::new(0.5, 1.0);
        assert_eq!(combine(e, e), ScanElement::new(0.25, 1.5));
        let id = ScanElement::identity();
        assert_eq!(combine(id, e), e);
        assert_eq!(combine(e, id), e);
        assert_eq!(combine(ScanElement::new(2.0, 3.0), ScanElement::new(5.0, 7.0)), ScanElement::new(10.0, 22.0));
    }

    #[test]
    fn three_element_scan() {
        let e = ScanElement::new(0.5, 1.0);
        let out = scan(&[e, e, e]);
        assert_eq!(out[2], ScanElement::new(0.125, 1.75));
    }

    #[test]
    fn matches_sequential_at_awkward_lengths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &t in &[1usize, 2, 3, 5, 7, 31, 64, 257, 1000, 1024] {
            let p = 3;
            let a = Array2::from_shape_fn((t, p), |_| {
                Complex64::from_polar(rng.gen_range(0.0..0.999), rng.gen_range(0.0..std::f64::consts::TAU))
            });
            let b = Array2::from_shape_fn((t, p), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let (x, stats) = scan_with(a.view(), b.view(), 1).unwrap();
            assert!(stats.combines <= 2 * t);
            for i in 0..p {
                let ac: Vec<_> = a.column(i).to_vec();
                let bc: Vec<_> = b.column(i).to_vec();
                let oracle = sequential(&ac, &bc);
                for k in 0..t {
                    assert!((x[[k, i]] - oracle[k]).norm() <= 1e-12 * (1.0 + oracle[k].norm()));
                }
            }
        }
    }

    #[test]
    fn broadcast_coefficients() {
        let a = Array2::from_elem((1, 1), 0.5);
        let b = Array2::from_elem((4, 1), 1.0);
        let (x, _) = scan_with(a.view(), b.view(), 1).unwrap();
        assert_eq!(x.column(0).to_vec(), vec![1.0, 1.5, 1.75, 1.875]);
    }

    #[test]
    fn workers_do_not_change_bits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((777, 4), |_| rng.gen_range(-0.99..0.99));
        let b = Array2::from_shape_fn((777, 4), |_| rng.gen_range(-1.0..1.0));
        let (x1, s1) = scan_with(a.view(), b.view(), 1).unwrap();
        for w in [2, 3, 4] {
            let (xw, sw) = scan_with(a.view(), b.view(), w).unwrap();
            assert_eq!(x1, xw);
            assert_eq!(s1, sw);
        }
    }

    #[test]
    fn shape_errors() {
        let a = Array2::from_elem((2, 1), 0.5);
        let b = Array2::from_elem((4, 1), 1.0);
        assert!(scan_with(a.view(), b.view(), 1).is_err());
    }

    fn element() -> impl Strategy<Value = ScanElement<f64>> {
        (-2.0f64..2.0, -2.0f64..2.0).prop_map(|(a, b)| ScanElement::new(a, b))
    }

    proptest! {
        #[test]
        fn combine_is_associative(e1 in element(), e2 in element(), e3 in element()) {
            let l = combine(combine(e1, e2), e3);
            let r = combine(e1, combine(e2, e3));
            prop_assert!((l.a - r.a).abs() <= 1e-12 * (1.0 + l.a.abs()));
            prop_assert!((l.b - r.b).abs() <= 1e-12 * (1.0 + l.b.abs()));
        }

        #[test]
        fn identity_is_neutral(e in element()) {
            prop_assert_eq!(combine(ScanElement::identity(), e), e);
            prop_assert_eq!(combine(e, ScanElement::identity()), e);
        }

        #[test]
        fn scan_agrees_with_loop(elems in proptest::collection::vec(element(), 1..200)) {
            let a: Vec<f64> = elems.iter().map(|e| e.a * 0.5).collect();
            let b: Vec<f64> = elems.iter().map(|e| e.b).collect();
            let oracle = sequential(&a, &b);
            let am = Array2::from_shape_vec((a.len(), 1), a).unwrap();
            let bm = Array2::from_shape_vec((b.len(), 1), b).unwrap();
            let (x, stats) = scan_with(am.view(), bm.view(), 1).unwrap();
            prop_assert!(stats.combines <= 2 * oracle.len());
            for (k, o) in oracle.iter().enumerate() {
                prop_assert!((x[[k, 0]] - o).abs() <= 1e-10 * (1.0 + o.abs()));
            }
        }
    }
}
