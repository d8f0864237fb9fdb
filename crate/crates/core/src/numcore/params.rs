use super::tensor::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Ordered, named parameter segments of a model.
///
/// Segment order is part of the identity of a parameter vector: flattening,
/// checkpointing and elementwise arithmetic all walk segments in insertion
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    segments: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.segments.iter().any(|(n, _)| *n == name) {
            return Err(invalid(format!("duplicate parameter segment {name:?}")));
        }
        self.segments.push((name, value));
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Result<Self> {
        self.push(name, value)?;
        Ok(self)
    }

    pub fn segments(&self) -> &[(String, Tensor)] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.segments.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.segments
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total number of scalar parameters, `M`.
    pub fn total_dims(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<Scalar> {
        let mut out = Vec::with_capacity(self.total_dims());
        for (_, t) in &self.segments {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Same layout as `self`, values taken from `flat`.
    pub fn unflatten(&self, flat: &[Scalar]) -> Result<Self> {
        if flat.len() != self.total_dims() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                lhs: vec![self.total_dims()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let segments = self
            .segments
            .iter()
            .map(|(name, t)| {
                let chunk = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                (name.clone(), Tensor::from_parts(t.shape().to_vec(), chunk))
            })
            .collect();
        Ok(Self { segments })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// True when both vectors have the same segment names and shapes in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub(crate) fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: vec![self.total_dims()],
                rhs: vec![other.total_dims()],
            })
        }
    }

    /// Elementwise `f(self, other)` into `self`.
    pub fn zip_apply(
        &mut self,
        other: &Self,
        op: &'static str,
        mut f: impl FnMut(&mut Scalar, Scalar),
    ) -> Result<()> {
        self.check_layout(other, op)?;
        for ((_, a), (_, b)) in self.segments.iter_mut().zip(&other.segments) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                f(x, y);
            }
        }
        Ok(())
    }

    /// `sum_k |self_k - other_k|`
    pub fn l1_distance(&self, other: &Self) -> Result<Scalar> {
        self.check_layout(other, "l1_distance")?;
        Ok(self
            .segments
            .iter()
            .zip(&other.segments)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y).abs())
            .sum())
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|(_, t)| t.is_finite())
    }
}
