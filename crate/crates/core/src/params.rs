use std::ops::{Deref, Index, IndexMut};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnlearnError};

/// Dense parameter vector: `p` weights followed by the intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    /// Weight block (everything except the trailing intercept).
    pub fn weights(&self) -> &[f64] {
        &self.0[..self.0.len().saturating_sub(1)]
    }

    pub fn intercept(&self) -> f64 {
        *self.0.last().unwrap_or(&0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(UnlearnError::shape(self.len(), other.len()));
        }
        Ok(())
    }

    pub fn try_sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        Ok(self.sub(other))
    }

    /// Elementwise difference. Panics on length mismatch; see [`Self::try_sub`].
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        assert_eq!(self.len(), x.len(), "parameter length mismatch");
        for (a, b) in self.0.iter_mut().zip(&x.0) {
            *a += alpha * b;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm1(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn from_dvector(v: &DVector<f64>) -> Self {
        Self(v.iter().copied().collect())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}
