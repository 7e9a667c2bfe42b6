//! Flat parameter vectors and the weighted averaging they support.
//!
//! A [`ParamVector`] is the unit exchanged between server and devices: a
//! flat `f64` array plus a [`Layout`] describing the tensors packed into
//! it. Vectors with equal layouts support element-wise arithmetic; mixing
//! layouts is a programmer error and panics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Shape of one packed tensor. Vectors (biases) use `cols == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub rows: usize,
    pub cols: usize,
}

impl TensorShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of tensor shapes; fixed for the lifetime of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout(Vec<TensorShape>);

impl Layout {
    pub fn new(shapes: Vec<TensorShape>) -> Self {
        Layout(shapes)
    }

    pub fn shapes(&self) -> &[TensorShape] {
        &self.0
    }

    pub fn total_len(&self) -> usize {
        self.0.iter().map(TensorShape::len).sum()
    }
}

/// Flat model parameters with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let n = layout.total_len();
        ParamVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Self {
        assert_eq!(
            layout.total_len(),
            values.len(),
            "value count does not match layout"
        );
        ParamVector { layout, values }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
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

    fn assert_same_layout(&self, other: &ParamVector) {
        assert_eq!(self.layout, other.layout, "parameter layout mismatch");
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &ParamVector) {
        self.assert_same_layout(other);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// `self - other`, element-wise.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        self.assert_same_layout(other);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVector {
            layout: self.layout.clone(),
            values,
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) {
        self.assert_same_layout(other);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        self.assert_same_layout(other);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Hard error if any value is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SimError::Numeric(format!(
                "non-finite parameter value in {context}"
            )))
        }
    }
}

/// Convex combination of models with non-negative weights.
///
/// Weights are normalized before accumulation. A single-model input is
/// returned unchanged so degenerate averages stay bit-identical to their
/// only member.
pub fn weighted_mean(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    assert_eq!(models.len(), weights.len(), "one weight per model");
    if models.is_empty() {
        return Err(SimError::Protocol("weighted mean of zero models".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(SimError::Protocol(
            "weighted mean requires positive total weight".into(),
        ));
    }
    if models.len() == 1 {
        return Ok(models[0].clone());
    }
    let mut out = ParamVector::zeros(models[0].layout.clone());
    for (model, w) in models.iter().zip(weights) {
        out.axpy(w / total, model);
    }
    Ok(out)
}
