use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Ordered, named collection of parameter tensors.
///
/// The segment order is fixed when the collection is built and defines the
/// flattening order used by [`ParamVector::flatten`], norms and dot products.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    segments: Vec<(String, Tensor)>,
}

/// Gradients share the exact layout of the parameters they differentiate.
pub type Gradient = ParamVector;

impl ParamVector {
    pub fn new() -> Self {
        Self {
            segments: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.segments.push((name.into(), tensor));
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Self {
        self.push(name, tensor);
        self
    }

    pub fn segments(&self) -> &[(String, Tensor)] {
        &self.segments
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.segments
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn segment(&self, index: usize) -> &Tensor {
        &self.segments[index].1
    }

    pub fn segment_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.segments[index].1
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, t) in &self.segments {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a vector with this layout from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::Dimension(format!(
                "expected {} flat values, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut segments = Vec::with_capacity(self.segments.len());
        for (name, t) in &self.segments {
            let n = t.len();
            let tensor = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            segments.push((name.clone(), tensor));
            offset += n;
        }
        Ok(Self { segments })
    }

    pub fn is_congruent(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Dimension(
                "parameter vectors have different layouts".into(),
            ))
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
    }

    pub fn sum_squares(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self.values().zip(other.values()).map(|(a, b)| a * b).sum())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_congruent(other)?;
        for ((_, a), (_, b)) in self.segments.iter_mut().zip(&other.segments) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in &mut self.segments {
            for x in t.data_mut() {
                *x *= alpha;
            }
        }
    }

    /// Returns `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}
