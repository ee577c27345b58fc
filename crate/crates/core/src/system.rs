//! Sequences and diagonal linear systems.
//!
//! All systems here satisfy the diagonal-dynamics assumption by type: the
//! transition is stored as its diagonal only. Low-rank corrections (S4)
//! live beside the diagonal in [`ContinuousSystem::low_rank`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};

/// Time-major real signal of shape `T × q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SequenceRepr", into = "SequenceRepr")]
pub struct Sequence {
    data: Array2<f64>,
}

impl Sequence {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(SsmError::InvalidArgument("sequence length must be ≥ 1".into()));
        }
        if data.ncols() == 0 {
            return Err(SsmError::InvalidArgument("sequence needs at least one channel".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(SsmError::InvalidArgument(format!(
                "non-finite sequence entry at flat index {i}"
            )));
        }
        Ok(Sequence { data })
    }

    pub fn zeros(len: usize, channels: usize) -> Self {
        Sequence::new(Array2::zeros((len.max(1), channels.max(1)))).expect("zeros are finite")
    }

    /// Unit impulse on `channel` at step 0.
    pub fn impulse(len: usize, channels: usize, channel: usize) -> Self {
        let mut s = Sequence::zeros(len, channels);
        s.data[[0, channel]] = 1.0;
        s
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let q = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != q) {
            return Err(SsmError::shape("Sequence::from_rows", "rectangular rows", "ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), q), flat)
            .map_err(|e| SsmError::InvalidArgument(e.to_string()))?;
        Sequence::new(data)
    }

    /// Single-channel sequence.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Sequence::new(
            Array2::from_shape_vec((values.len(), 1), values.to_vec())
                .map_err(|e| SsmError::InvalidArgument(e.to_string()))?,
        )
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn step(&self, k: usize) -> ArrayView1<'_, f64> {
        self.data.row(k)
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.data.column(j)
    }

    pub fn scaled(&self, alpha: f64) -> Sequence {
        Sequence {
            data: &self.data * alpha,
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceRepr {
    length: usize,
    channels: usize,
    data: Vec<Vec<f64>>,
}

impl From<Sequence> for SequenceRepr {
    fn from(s: Sequence) -> Self {
        SequenceRepr {
            length: s.len(),
            channels: s.channels(),
            data: s.data.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<SequenceRepr> for Sequence {
    type Error = SsmError;
    fn try_from(r: SequenceRepr) -> Result<Self> {
        if r.data.len() != r.length || r.data.iter().any(|row| row.len() != r.channels) {
            return Err(SsmError::Format("sequence dims disagree with data".into()));
        }
        Sequence::from_rows(&r.data)
    }
}

/// The `(r, s)` vectors of a rank-one update `A = diag(λ) + r s*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    #[serde(with = "vec1")]
    pub r: Array1<Complex64>,
    #[serde(with = "vec1")]
    pub s: Array1<Complex64>,
}

/// Continuous-time parameters of `ẋ = A x + B u`, `y = C x + D u` with
/// `A = diag(λ)` (plus an optional rank-one term).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSystem {
    #[serde(with = "vec1")]
    pub lambda: Array1<Complex64>,
    pub low_rank: Option<LowRank>,
    #[serde(with = "rows")]
    pub b: Array2<Complex64>,
    #[serde(with = "rows")]
    pub c: Array2<Complex64>,
    #[serde(with = "vec1")]
    pub d: Array1<f64>,
    pub delta: f64,
    /// When set, every `Re(λᵢ)` must be ≤ 0.
    #[serde(default)]
    pub stable: bool,
}

impl ContinuousSystem {
    pub fn new(
        lambda: Array1<Complex64>,
        b: Array2<Complex64>,
        c: Array2<Complex64>,
        d: Array1<f64>,
        delta: f64,
    ) -> Result<Self> {
        let sys = ContinuousSystem {
            lambda,
            low_rank: None,
            b,
            c,
            d,
            delta,
            stable: false,
        };
        sys.check()?;
        Ok(sys)
    }

    pub fn with_low_rank(mut self, r: Array1<Complex64>, s: Array1<Complex64>) -> Result<Self> {
        self.low_rank = Some(LowRank { r, s });
        self.check()?;
        Ok(self)
    }

    pub fn with_stable(mut self, stable: bool) -> Result<Self> {
        self.stable = stable;
        self.check()?;
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.lambda.len()
    }

    pub fn q(&self) -> usize {
        self.d.len()
    }

    pub fn check(&self) -> Result<()> {
        let (p, q) = (self.p(), self.q());
        if p == 0 || q == 0 {
            return Err(SsmError::InvalidArgument("p and q must be ≥ 1".into()));
        }
        if self.b.dim() != (p, q) {
            return Err(SsmError::shape("ContinuousSystem.b", format!("{p}x{q}"), format!("{:?}", self.b.dim())));
        }
        if self.c.dim() != (q, p) {
            return Err(SsmError::shape("ContinuousSystem.c", format!("{q}x{p}"), format!("{:?}", self.c.dim())));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(SsmError::InvalidArgument(format!("Δ must be positive, got {}", self.delta)));
        }
        if let Some(lr) = &self.low_rank {
            if lr.r.len() != p || lr.s.len() != p {
                return Err(SsmError::shape("ContinuousSystem.low_rank", p, lr.r.len().max(lr.s.len())));
            }
        }
        if self.stable {
            if let Some(i) = self.lambda.iter().position(|l| l.re > 0.0) {
                return Err(SsmError::InvalidArgument(format!(
                    "stable system has Re(λ{i}) = {} > 0",
                    self.lambda[i].re
                )));
            }
        }
        Ok(())
    }
}

/// Discrete diagonal system `x⁺ = ā ⊙ x + B̄ u`, `y = Re(C̄ x) + D̄ ⊙ u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSystem {
    #[serde(with = "vec1")]
    pub abar: Array1<Complex64>,
    #[serde(with = "rows")]
    pub bbar: Array2<Complex64>,
    #[serde(with = "rows")]
    pub cbar: Array2<Complex64>,
    #[serde(with = "vec1")]
    pub dbar: Array1<f64>,
    /// When set, `|āᵢ| ≤ 1` is part of the contract.
    #[serde(default)]
    pub memory: bool,
}

impl DiscreteSystem {
    pub fn new(
        abar: Array1<Complex64>,
        bbar: Array2<Complex64>,
        cbar: Array2<Complex64>,
        dbar: Array1<f64>,
    ) -> Result<Self> {
        let (p, q) = (abar.len(), dbar.len());
        if p == 0 || q == 0 {
            return Err(SsmError::InvalidArgument("p and q must be ≥ 1".into()));
        }
        if bbar.dim() != (p, q) {
            return Err(SsmError::shape("DiscreteSystem.bbar", format!("{p}x{q}"), format!("{:?}", bbar.dim())));
        }
        if cbar.dim() != (q, p) {
            return Err(SsmError::shape("DiscreteSystem.cbar", format!("{q}x{p}"), format!("{:?}", cbar.dim())));
        }
        Ok(DiscreteSystem {
            abar,
            bbar,
            cbar,
            dbar,
            memory: false,
        })
    }

    /// Scalar SISO system `(ā, b̄, c̄, d̄)`.
    pub fn scalar(abar: Complex64, bbar: Complex64, cbar: Complex64, dbar: f64) -> Self {
        DiscreteSystem::new(
            Array1::from_elem(1, abar),
            Array2::from_elem((1, 1), bbar),
            Array2::from_elem((1, 1), cbar),
            Array1::from_elem(1, dbar),
        )
        .expect("scalar shapes are consistent")
    }

    pub fn with_memory(mut self, memory: bool) -> Self {
        self.memory = memory;
        self
    }

    pub fn p(&self) -> usize {
        self.abar.len()
    }

    pub fn q(&self) -> usize {
        self.dbar.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Invariant {
    NonFinite,
    OutsideUnitDisk,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub field: &'static str,
    pub index: usize,
    pub value: f64,
}

/// Check a discrete system against its invariants. Empty iff all hold.
pub fn validate_system(sys: &DiscreteSystem) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut finite = |field: &'static str, vals: &mut dyn Iterator<Item = (usize, f64)>| {
        for (i, v) in vals {
            if !v.is_finite() {
                out.push(Violation {
                    invariant: Invariant::NonFinite,
                    field,
                    index: i,
                    value: v,
                });
            }
        }
    };
    finite("abar", &mut sys.abar.iter().enumerate().map(|(i, z)| (i, z.re + z.im)));
    finite("bbar", &mut sys.bbar.iter().enumerate().map(|(i, z)| (i, z.re + z.im)));
    finite("cbar", &mut sys.cbar.iter().enumerate().map(|(i, z)| (i, z.re + z.im)));
    finite("dbar", &mut sys.dbar.iter().copied().enumerate());
    if sys.memory {
        for (i, z) in sys.abar.iter().enumerate() {
            let m = z.norm();
            if m > 1.0 {
                out.push(Violation {
                    invariant: Invariant::OutsideUnitDisk,
                    field: "abar",
                    index: i,
                    value: m,
                });
            }
        }
    }
    out
}

/// Largest modulus on the diagonal of `Ā`.
pub fn spectral_radius(sys: &DiscreteSystem) -> f64 {
    sys.abar.iter().fold(0.0, |m, z| m.max(z.norm()))
}

/// Per-step diagonal streams of a linear time-varying system.
///
/// `drive[k]` is the precomputed `B̄ₖ u(k)`; `c` holds `Cₖ` when the
/// model has a time-varying readout (S6).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeVaryingParams<S> {
    pub abar: Array2<S>,
    pub drive: Array2<S>,
    pub c: Option<Array2<f64>>,
    pub delta: Option<Array1<f64>>,
}

impl<S> TimeVaryingParams<S> {
    pub fn new(
        abar: Array2<S>,
        drive: Array2<S>,
        c: Option<Array2<f64>>,
        delta: Option<Array1<f64>>,
    ) -> Result<Self> {
        let t = abar.nrows();
        if t == 0 {
            return Err(SsmError::InvalidArgument("empty time-varying stream".into()));
        }
        if drive.nrows() != t {
            return Err(SsmError::shape("TimeVaryingParams.drive", t, drive.nrows()));
        }
        if let Some(c) = &c {
            if c.nrows() != t {
                return Err(SsmError::shape("TimeVaryingParams.c", t, c.nrows()));
            }
        }
        if let Some(d) = &delta {
            if d.len() != t {
                return Err(SsmError::shape("TimeVaryingParams.delta", t, d.len()));
            }
            if let Some(k) = d.iter().position(|v| !(*v > 0.0)) {
                return Err(SsmError::InvalidArgument(format!("Δ_{k} = {} is not positive", d[k])));
            }
        }
        Ok(TimeVaryingParams { abar, drive, c, delta })
    }

    pub fn len(&self) -> usize {
        self.abar.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Serialize a 1-D array as a plain list.
pub(crate) mod vec1 {
    use ndarray::Array1;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer>(a: &Array1<T>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(a.iter())
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Array1<T>, D::Error> {
        Ok(Array1::from(Vec::<T>::deserialize(d)?))
    }
}

/// Serialize a 2-D array as a list of rows.
pub(crate) mod rows {
    use ndarray::Array2;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize + Clone, S: Serializer>(a: &Array2<T>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<T>> = a.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, T: Deserialize<'de> + Clone, D: Deserializer<'de>>(d: D) -> Result<Array2<T>, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let nrows = rows.len();
        let flat: Vec<T> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((nrows, ncols), flat).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn diag_system(abar: Vec<Complex64>) -> DiscreteSystem {
        let p = abar.len();
        DiscreteSystem::new(
            Array1::from(abar),
            Array2::from_elem((p, 1), c(1.0, 0.0)),
            Array2::from_elem((1, p), c(1.0, 0.0)),
            Array1::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn validate_accepts_disk_points() {
        let sys = diag_system(vec![c(0.5, 0.0), c(0.0, 0.9)]).with_memory(true);
        assert!(validate_system(&sys).is_empty());
    }

    #[test]
    fn validate_flags_outside_disk() {
        let sys = diag_system(vec![c(1.2, 0.0)]).with_memory(true);
        let v = validate_system(&sys);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].invariant, Invariant::OutsideUnitDisk);
        assert_eq!(v[0].index, 0);
        // Without the memory flag the disk is not part of the contract.
        assert!(validate_system(&sys.clone().with_memory(false)).is_empty());
    }

    #[test]
    fn validate_on_circle_of_radius_0999() {
        let pts: Vec<_> = (0..8)
            .map(|k| Complex64::from_polar(0.999, k as f64 * std::f64::consts::PI / 4.0 + 0.1))
            .collect();
        for z in &pts {
            assert!(z.norm() <= 1.0);
        }
        let sys = diag_system(pts).with_memory(true);
        assert!(validate_system(&sys).is_empty());
    }

    #[test]
    fn validate_flags_non_finite() {
        let sys = diag_system(vec![c(f64::NAN, 0.0)]);
        let v = validate_system(&sys);
        assert_eq!(v[0].invariant, Invariant::NonFinite);
    }

    #[test]
    fn spectral_radius_examples() {
        assert_eq!(spectral_radius(&diag_system(vec![c(0.0, 0.0), c(0.0, 0.0)])), 0.0);
        assert!((spectral_radius(&diag_system(vec![c(0.3, 0.4)])) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn spectral_radius_is_max_modulus(pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 16)) {
            let abar: Vec<_> = pts.iter().map(|&(a, b)| c(a, b)).collect();
            let mut brute = 0.0f64;
            for z in &abar {
                let m = (z.re * z.re + z.im * z.im).sqrt();
                if m > brute { brute = m; }
            }
            let sys = diag_system(abar).with_memory(true);
            prop_assert!((spectral_radius(&sys) - brute).abs() < 1e-15);
            // idempotent and side-effect free
            let v1 = validate_system(&sys);
            let v2 = validate_system(&sys);
            prop_assert_eq!(v1, v2);
        }
    }

    #[test]
    fn continuous_rejects_bad_delta_and_unstable() {
        let lam = array![c(-1.0, 0.0)];
        let b = Array2::from_elem((1, 1), c(1.0, 0.0));
        let cm = Array2::from_elem((1, 1), c(1.0, 0.0));
        assert!(ContinuousSystem::new(lam.clone(), b.clone(), cm.clone(), array![0.0], 0.0).is_err());
        let unstable = ContinuousSystem::new(array![c(0.5, 0.0)], b, cm, array![0.0], 0.1).unwrap();
        assert!(unstable.with_stable(true).is_err());
    }

    #[test]
    fn json_uses_re_im_pairs() {
        let sys = diag_system(vec![c(0.5, -0.25)]);
        let js = serde_json::to_value(&sys).unwrap();
        assert_eq!(js["bbar"], serde_json::json!([[[1.0, 0.0]]]));
        assert_eq!(js["abar"][0], serde_json::json!([0.5, -0.25]));
        let back: DiscreteSystem = serde_json::from_value(js).unwrap();
        assert_eq!(back, sys);

        let s = Sequence::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let js = serde_json::to_value(&s).unwrap();
        assert_eq!(js["length"], 2);
        let back: Sequence = serde_json::from_value(js).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn sequence_rejects_non_finite() {
        assert!(Sequence::scalar(&[1.0, f64::INFINITY]).is_err());
        assert!(Sequence::scalar(&[]).is_err());
    }
}
