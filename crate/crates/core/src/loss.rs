//! Regularized empirical risk for linear models.
//!
//! `L(θ, D) = (1/n) Σ ℓ(x_i, y_i; θ) + (λ/2)·‖w‖²` where `θ = (w, b)` and the
//! intercept `b` is never regularized. All sums run over rows in table order
//! so identical inputs give bit-identical outputs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::DatasetTable;
use crate::error::{Result, UnlearnError};
use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy on labels in {0, 1}.
    Logistic,
    /// `½ (xᵀw + b − y)²` with the label used as a real target.
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub l2_lambda: f64,
}

impl LossSpec {
    pub fn logistic(l2_lambda: f64) -> Self {
        Self { kind: LossKind::Logistic, l2_lambda }
    }

    pub fn squared(l2_lambda: f64) -> Self {
        Self { kind: LossKind::Squared, l2_lambda }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.l2_lambda.is_finite() || self.l2_lambda < 0.0 {
            return Err(UnlearnError::InvalidConfig(format!(
                "l2_lambda must be finite and nonnegative, got {}",
                self.l2_lambda
            )));
        }
        Ok(())
    }

    /// Per-sample loss as a function of the margin `z`.
    pub fn sample_loss(&self, z: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => softplus(z) - y * z,
            LossKind::Squared => 0.5 * (z - y) * (z - y),
        }
    }

    /// dℓ/dz
    pub fn sample_residual(&self, z: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => sigmoid(z) - y,
            LossKind::Squared => z - y,
        }
    }

    /// d²ℓ/dz²
    pub fn sample_curvature(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            LossKind::Squared => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `xᵀw + b`, summed left to right.
pub fn margin(params: &[f64], row: &[f64]) -> f64 {
    let p = row.len();
    let mut z = 0.0;
    for j in 0..p {
        z += params[j] * row[j];
    }
    z + params[p]
}

fn check(params: &ParamVector, data: &DatasetTable) -> Result<()> {
    if data.p() + 1 != params.len() {
        return Err(UnlearnError::shape(data.p() + 1, params.len()));
    }
    if data.is_empty() {
        return Err(UnlearnError::degenerate("loss over an empty dataset"));
    }
    Ok(())
}

/// Unnormalized `Σ_i ∇ℓ_i(θ)` over the rows at `positions` (no regularizer).
pub fn gradient_sum(params: &ParamVector, data: &DatasetTable, positions: &[usize], spec: &LossSpec) -> Vec<f64> {
    let p = data.p();
    let mut sum = vec![0.0; p + 1];
    for &i in positions {
        accumulate_sample_gradient(params, data, i, spec, &mut sum);
    }
    sum
}

fn accumulate_sample_gradient(
    params: &ParamVector,
    data: &DatasetTable,
    i: usize,
    spec: &LossSpec,
    sum: &mut [f64],
) {
    let row = data.row(i);
    let p = row.len();
    let r = spec.sample_residual(margin(params, row), data.label(i) as f64);
    for j in 0..p {
        sum[j] += r * row[j];
    }
    sum[p] += r;
}

/// Turns a gradient sum over `count` rows into the gradient of the mean
/// regularized loss.
pub fn finish_gradient(sum: &[f64], count: usize, params: &ParamVector, spec: &LossSpec) -> ParamVector {
    let p = sum.len() - 1;
    let nf = count as f64;
    let mut g = Vec::with_capacity(p + 1);
    for j in 0..p {
        g.push(sum[j] / nf + spec.l2_lambda * params[j]);
    }
    g.push(sum[p] / nf);
    ParamVector::new(g)
}

/// Gradient of the regularized per-sample loss `ℓ_i + (λ/2)‖w‖²`.
pub fn sample_gradient(params: &ParamVector, data: &DatasetTable, i: usize, spec: &LossSpec) -> ParamVector {
    let mut sum = vec![0.0; data.p() + 1];
    accumulate_sample_gradient(params, data, i, spec, &mut sum);
    finish_gradient(&sum, 1, params, spec)
}

fn regularizer(params: &ParamVector, spec: &LossSpec) -> f64 {
    let w = params.weights();
    0.5 * spec.l2_lambda * w.iter().map(|v| v * v).sum::<f64>()
}

pub fn loss_value(params: &ParamVector, data: &DatasetTable, spec: &LossSpec) -> Result<f64> {
    check(params, data)?;
    let mut total = 0.0;
    for i in 0..data.n() {
        total += spec.sample_loss(margin(params, data.row(i)), data.label(i) as f64);
    }
    Ok(total / data.n() as f64 + regularizer(params, spec))
}

pub fn loss_gradient(params: &ParamVector, data: &DatasetTable, spec: &LossSpec) -> Result<ParamVector> {
    check(params, data)?;
    let all: Vec<usize> = (0..data.n()).collect();
    let sum = gradient_sum(params, data, &all, spec);
    Ok(finish_gradient(&sum, data.n(), params, spec))
}

/// Loss and gradient in a single pass. The gradient is bit-identical to
/// [`loss_gradient`].
pub fn loss_and_gradient(
    params: &ParamVector,
    data: &DatasetTable,
    spec: &LossSpec,
) -> Result<(f64, ParamVector)> {
    check(params, data)?;
    let p = data.p();
    let mut total = 0.0;
    let mut sum = vec![0.0; p + 1];
    for i in 0..data.n() {
        let row = data.row(i);
        let y = data.label(i) as f64;
        let z = margin(params, row);
        total += spec.sample_loss(z, y);
        let r = spec.sample_residual(z, y);
        for j in 0..p {
            sum[j] += r * row[j];
        }
        sum[p] += r;
    }
    let value = total / data.n() as f64 + regularizer(params, spec);
    Ok((value, finish_gradient(&sum, data.n(), params, spec)))
}

/// Hessian of the mean regularized loss; the intercept row/column carries no
/// regularization.
pub fn loss_hessian(params: &ParamVector, data: &DatasetTable, spec: &LossSpec) -> Result<DMatrix<f64>> {
    check(params, data)?;
    let p = data.p();
    let d = p + 1;
    let mut h = DMatrix::<f64>::zeros(d, d);
    let mut xt = vec![0.0; d];
    for i in 0..data.n() {
        let row = data.row(i);
        let c = spec.sample_curvature(margin(params, row));
        xt[..p].copy_from_slice(row);
        xt[p] = 1.0;
        for a in 0..d {
            let ca = c * xt[a];
            for b in a..d {
                h[(a, b)] += ca * xt[b];
            }
        }
    }
    let nf = data.n() as f64;
    for a in 0..d {
        for b in a..d {
            let v = h[(a, b)] / nf;
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    for j in 0..p {
        h[(j, j)] += spec.l2_lambda;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_table, ridge_closed_form};
    use nalgebra::SymmetricEigen;

    #[test]
    fn logistic_at_zero_is_ln2() {
        let t = random_table(40, 3, 1);
        let theta = ParamVector::zeros(4);
        let v = loss_value(&theta, &t, &LossSpec::logistic(0.0)).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn empty_and_shape_errors() {
        let t = DatasetTable::empty(3, 2);
        let theta = ParamVector::zeros(4);
        assert!(matches!(
            loss_value(&theta, &t, &LossSpec::logistic(0.1)),
            Err(UnlearnError::DegenerateInput(_))
        ));
        let t = random_table(5, 3, 1);
        assert!(matches!(
            loss_gradient(&ParamVector::zeros(3), &t, &LossSpec::logistic(0.1)),
            Err(UnlearnError::ShapeError { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn ridge_minimizer_value_and_gradient() {
        let t = random_table(20, 3, 7);
        let spec = LossSpec::squared(0.3);
        let theta = ridge_closed_form(&t, spec.l2_lambda, None).unwrap();
        let g = loss_gradient(&theta, &t, &spec).unwrap();
        assert!(g.norm2() < 1e-10, "gradient at minimizer {}", g.norm2());
        // residual oracle straight from the normal-equations solution
        let mut rss = 0.0;
        for i in 0..t.n() {
            let r = margin(&theta, t.row(i)) - t.label(i) as f64;
            rss += r * r;
        }
        let w2: f64 = theta.weights().iter().map(|w| w * w).sum();
        let oracle = 0.5 * rss / t.n() as f64 + 0.5 * spec.l2_lambda * w2;
        let v = loss_value(&theta, &t, &spec).unwrap();
        assert!((v - oracle).abs() < 1e-14);
    }

    #[test]
    fn single_sample_gradient() {
        let t = random_table(1, 4, 3);
        let theta = ParamVector::new(vec![0.1, -0.2, 0.3, 0.05, 0.4]);
        let spec = LossSpec::logistic(0.5);
        let g = loss_gradient(&theta, &t, &spec).unwrap();
        let r = sigmoid(margin(&theta, t.row(0))) - t.label(0) as f64;
        for j in 0..4 {
            assert!((g[j] - (r * t.row(0)[j] + 0.5 * theta[j])).abs() < 1e-15);
        }
        assert!((g[4] - r).abs() < 1e-15);
        assert_eq!(g, sample_gradient(&theta, &t, 0, &spec));
    }

    #[test]
    fn squared_hessian_is_gram_plus_lambda() {
        let t = random_table(30, 3, 11);
        let spec = LossSpec::squared(0.7);
        let h = loss_hessian(&ParamVector::zeros(4), &t, &spec).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let mut s = 0.0;
                for i in 0..t.n() {
                    let xa = if a < 3 { t.row(i)[a] } else { 1.0 };
                    let xb = if b < 3 { t.row(i)[b] } else { 1.0 };
                    s += xa * xb;
                }
                let mut expected = s / 30.0;
                if a == b && a < 3 {
                    expected += 0.7;
                }
                assert!((h[(a, b)] - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_features_hessian() {
        let rows = vec![vec![0.0, 0.0]; 6];
        let t = DatasetTable::from_rows(&rows, vec![0, 1, 0, 1, 1, 0], 2).unwrap();
        let h = loss_hessian(&ParamVector::zeros(3), &t, &LossSpec::logistic(1.0)).unwrap();
        assert_eq!(h[(0, 0)], 1.0);
        assert_eq!(h[(1, 1)], 1.0);
        assert_eq!(h[(0, 1)], 0.0);
        assert_eq!(h[(2, 2)], 0.25);
    }

    #[test]
    fn logistic_hessian_matches_finite_differences() {
        let t = random_table(50, 4, 5);
        let spec = LossSpec::logistic(0.2);
        let theta = ParamVector::new(vec![0.3, -0.5, 0.2, 0.8, -0.1]);
        let h = loss_hessian(&theta, &t, &spec).unwrap();
        let step = 1e-5;
        for j in 0..5 {
            let mut plus = theta.clone();
            plus[j] += step;
            let mut minus = theta.clone();
            minus[j] -= step;
            let gp = loss_gradient(&plus, &t, &spec).unwrap();
            let gm = loss_gradient(&minus, &t, &spec).unwrap();
            for i in 0..5 {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                assert!((fd - h[(i, j)]).abs() < 1e-5, "({i},{j}) fd {fd} vs {}", h[(i, j)]);
            }
        }
        let eig = SymmetricEigen::new(h.clone());
        assert!(eig.eigenvalues.min() > 0.0);
    }
}
