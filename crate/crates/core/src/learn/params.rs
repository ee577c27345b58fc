use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};

/// Optimizer group. Dynamics parameters (eigenvalues, step sizes) get their own learning rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    #[default]
    Default,
    Dynamics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub group: ParamGroup,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector split into named row-major matrices, with a
/// gradient buffer of the same layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    segments: Vec<Segment>,
    values: Vec<f64>,
    #[serde(skip)]
    grads: Vec<f64>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, group: ParamGroup) -> Result<()> {
        let name = name.into();
        if self.index(&name).is_some() {
            return Err(SsmError::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(SsmError::InvalidArgument(format!("parameter `{name}` has non-finite entry {i}")));
        }
        let (rows, cols) = value.dim();
        self.segments.push(Segment {
            name,
            rows,
            cols,
            offset: self.values.len(),
            group,
        });
        self.values.extend(value.iter().copied());
        self.grads.resize(self.values.len(), 0.0);
        Ok(())
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index(name).ok_or_else(|| SsmError::UnknownParam(name.to_string()))
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, idx: usize) -> &Segment {
        &self.segments[idx]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        self.ensure_grads();
        &mut self.grads
    }

    fn ensure_grads(&mut self) {
        if self.grads.len() != self.values.len() {
            self.grads = vec![0.0; self.values.len()];
        }
    }

    pub fn view_at(&self, idx: usize) -> ArrayView2<'_, f64> {
        let s = &self.segments[idx];
        ArrayView2::from_shape((s.rows, s.cols), &self.values[s.range()]).expect("segment shape")
    }

    pub fn get(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        Ok(self.view_at(self.require(name)?))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, f64>> {
        let idx = self.require(name)?;
        let s = self.segments[idx].clone();
        Ok(ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.values[s.range()]).expect("segment shape"))
    }

    pub fn set(&mut self, name: &str, value: ArrayView2<'_, f64>) -> Result<()> {
        let mut dst = self.get_mut(name)?;
        if dst.dim() != value.dim() {
            return Err(SsmError::shape("ParamStore::set", format!("{:?}", dst.dim()), format!("{:?}", value.dim())));
        }
        dst.assign(&value);
        Ok(())
    }

    /// Scalar parameter value.
    pub fn scalar(&self, name: &str) -> Result<f64> {
        let v = self.get(name)?;
        if v.len() != 1 {
            return Err(SsmError::shape("ParamStore::scalar", 1, v.len()));
        }
        Ok(v[[0, 0]])
    }

    pub fn grad(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        let idx = self.require(name)?;
        let s = &self.segments[idx];
        if self.grads.len() != self.values.len() {
            return Err(SsmError::InvalidArgument("gradient buffer not allocated".into()));
        }
        Ok(ArrayView2::from_shape((s.rows, s.cols), &self.grads[s.range()]).expect("segment shape"))
    }

    pub fn zero_grads(&mut self) {
        self.ensure_grads();
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&mut self, idx: usize, g: ArrayView2<'_, f64>) {
        self.ensure_grads();
        let s = &self.segments[idx];
        assert_eq!((s.rows, s.cols), g.dim(), "gradient shape for `{}`", s.name);
        for (dst, v) in self.grads[s.range()].iter_mut().zip(g.iter()) {
            *dst += v;
        }
    }

    /// Add `other`'s gradient buffer into this one. Layouts must match.
    pub fn add_grads_from(&mut self, other: &[f64]) {
        self.ensure_grads();
        assert_eq!(self.grads.len(), other.len());
        for (a, b) in self.grads.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Locate a flat index as `(segment name, index within segment)`.
    pub fn locate(&self, flat: usize) -> (String, usize) {
        for s in &self.segments {
            if s.range().contains(&flat) {
                return (s.name.clone(), flat - s.offset);
            }
        }
        (String::from("?"), flat)
    }

    pub fn group_of(&self, flat: usize) -> ParamGroup {
        self.segments
            .iter()
            .find(|s| s.range().contains(&flat))
            .map_or(ParamGroup::Default, |s| s.group)
    }

    /// Same layout, used after deserialization.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.segments == other.segments
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            let (segment, index) = self.locate(i);
            return Err(SsmError::InvalidArgument(format!("non-finite parameter `{segment}`[{index}]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn add_get_set_roundtrip() {
        let mut s = ParamStore::new();
        s.add("w", array![[1.0, 2.0], [3.0, 4.0]], ParamGroup::Default).unwrap();
        s.add("lam", array![[-0.5]], ParamGroup::Dynamics).unwrap();
        assert_eq!(s.get("w").unwrap()[[1, 0]], 3.0);
        assert_eq!(s.scalar("lam").unwrap(), -0.5);
        s.set("w", array![[0.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert_eq!(s.values(), &[0.0, 0.0, 0.0, 1.0, -0.5]);
        assert_eq!(s.locate(4), ("lam".to_string(), 0));
        assert_eq!(s.group_of(4), ParamGroup::Dynamics);
        assert!(s.add("w", array![[0.0]], ParamGroup::Default).is_err());
        assert!(matches!(s.get("nope"), Err(SsmError::UnknownParam(_))));
    }

    #[test]
    fn grads_match_value_layout() {
        let mut s = ParamStore::new();
        s.add("a", array![[1.0, 2.0]], ParamGroup::Default).unwrap();
        s.accumulate_grad(0, array![[0.5, -1.0]].view());
        s.accumulate_grad(0, array![[0.5, -1.0]].view());
        assert_eq!(s.grad("a").unwrap(), array![[1.0, -2.0]]);
        s.zero_grads();
        assert_eq!(s.grad_norm(), 0.0);
    }

    #[test]
    fn serde_keeps_values_and_layout() {
        let mut s = ParamStore::new();
        s.add("a", array![[1.0, 2.0]], ParamGroup::Dynamics).unwrap();
        s.step = 7;
        let json = serde_json::to_string(&s).unwrap();
        let back: ParamStore = serde_json::from_str(&json).unwrap();
        assert!(back.same_layout(&s));
        assert_eq!(back.values(), s.values());
        assert_eq!(back.step, 7);
    }
}
