//! Prediction interface shared by linear models and ensembles.

use serde::{Deserialize, Serialize};

use crate::loss::{margin, sigmoid, LossKind, LossSpec};
use crate::params::ParamVector;

/// Binary classifier with a probability output.
pub trait Classifier {
    /// Probability of label 1.
    fn predict_proba(&self, x: &[f64]) -> f64;

    /// Real-valued output used for regression metrics. Defaults to the
    /// probability.
    fn predict_score(&self, x: &[f64]) -> f64 {
        self.predict_proba(x)
    }

    /// Label 1 iff the probability exceeds one half.
    fn predict_label(&self, x: &[f64]) -> u32 {
        u32::from(self.predict_proba(x) > 0.5)
    }

    /// `[P(0), P(1)]`.
    fn class_probabilities(&self, x: &[f64]) -> Vec<f64> {
        let p = self.predict_proba(x);
        vec![1.0 - p, p]
    }
}

/// Parameters plus the loss they were fitted under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub params: ParamVector,
    pub spec: LossSpec,
}

impl LinearModel {
    pub fn new(params: ParamVector, spec: LossSpec) -> Self {
        Self { params, spec }
    }
}

impl Classifier for LinearModel {
    /// Logistic models return `σ(z)`; squared-loss models return the margin
    /// clamped to `[0, 1]`.
    fn predict_proba(&self, x: &[f64]) -> f64 {
        let z = margin(&self.params, x);
        match self.spec.kind {
            LossKind::Logistic => sigmoid(z),
            LossKind::Squared => z.clamp(0.0, 1.0),
        }
    }

    fn predict_score(&self, x: &[f64]) -> f64 {
        let z = margin(&self.params, x);
        match self.spec.kind {
            LossKind::Logistic => sigmoid(z),
            LossKind::Squared => z,
        }
    }
}
