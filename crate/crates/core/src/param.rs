//! Flattened model parameters in one canonical ordering.

use std::sync::Arc;

use crate::error::{Error, Result};

/// One named parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered parameter descriptors; offsets are non-overlapping and cover the
/// data exactly. Layouts are shared so vectors from the same model compare by
/// pointer first.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    /// Builds a layout from (name, shape) pairs in canonical order.
    pub fn new(parts: Vec<(String, Vec<usize>)>) -> Self {
        let mut entries = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (name, shape) in parts {
            let len: usize = shape.iter().product();
            entries.push(ParamEntry { name, shape, offset });
            offset += len;
        }
        Self { entries, total: offset }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Flattened parameters (or a gradient in the same coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        Self { layout, data: vec![0.0; n] }
    }

    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "data length {} != layout length {}",
                data.len(),
                layout.total_len()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Slice for the named entry.
    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        let e = self.layout.entry(name)?;
        Some(&self.data[e.offset..e.offset + e.len()])
    }

    /// Errors unless `other` shares this vector's layout.
    pub fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch("parameter vectors come from different models".into()))
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    /// A new vector equal to self + alpha * other.
    pub fn added(&self, alpha: f64, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.axpy(alpha, other);
        out
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(vec![
            ("w0".into(), vec![2, 3]),
            ("b0".into(), vec![3]),
        ]))
    }

    #[test]
    fn offsets_cover_exactly() {
        let l = layout();
        assert_eq!(l.total_len(), 9);
        assert_eq!(l.entry("w0").unwrap().offset, 0);
        assert_eq!(l.entry("b0").unwrap().offset, 6);
    }

    #[test]
    fn slice_and_axpy() {
        let l = layout();
        let mut a = ParamVector::zeros(l.clone());
        let b = ParamVector::from_data(l, (1..=9).map(|x| x as f64).collect()).unwrap();
        a.axpy(2.0, &b);
        assert_eq!(a.slice("b0").unwrap(), &[14.0, 16.0, 18.0]);
        assert_eq!(a.dot(&b), (1..=9).map(|x| 2.0 * (x * x) as f64).sum::<f64>());
    }

    #[test]
    fn layout_mismatch_rejected() {
        let a = ParamVector::zeros(layout());
        let other = Arc::new(ParamLayout::new(vec![("w0".into(), vec![3, 3])]));
        let b = ParamVector::zeros(other);
        assert!(a.check_same_layout(&b).is_err());
    }
}
