//! Newton-style approximate removal: the Fisher and Influence mechanisms.
//!
//! Both losses supported here are (penalized) log-likelihoods, so the Fisher
//! information matrix is taken to be the loss Hessian.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::linalg::{inverse_quarter_root, solve_spd};
use crate::loss::{loss_gradient, loss_hessian, LossSpec};
use crate::params::ParamVector;
use crate::rng::{normal_vec, tags, RngStream};

/// Splits the removal set into consecutive mini-batches of at most
/// `batch_size` ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalBatchPlan {
    pub batch_size: usize,
}

impl RemovalBatchPlan {
    pub fn new(batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(UnlearnError::InvalidConfig("removal batch size must be positive".into()));
        }
        Ok(Self { batch_size })
    }

    /// One batch holding the whole removal set.
    pub fn single() -> Self {
        Self { batch_size: usize::MAX }
    }

    /// `s = ⌈m/m′⌉`.
    pub fn batch_count(&self, m: usize) -> usize {
        m.div_ceil(self.batch_size.max(1))
    }

    pub fn batches<'a>(&self, ids: &'a [SampleId]) -> Vec<&'a [SampleId]> {
        ids.chunks(self.batch_size.max(1)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub rng: RngStream,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { sigma: 0.0, rng: RngStream::from_seed(0) }
    }
}

fn check_removal(data: &DatasetTable, ids: &[SampleId]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for &id in ids {
        if !data.contains(id) || !seen.insert(id) {
            return Err(UnlearnError::MissingSample(id));
        }
    }
    Ok(())
}

fn newton_direction(h: &nalgebra::DMatrix<f64>, g: &ParamVector) -> Result<ParamVector> {
    Ok(ParamVector::from_dvector(&solve_spd(h, &g.to_dvector())?))
}

/// Fisher removal. Returns the updated parameters and the noise term added
/// after each batch (empty when `σ = 0`).
pub fn fisher_unlearn_traced(
    theta: &ParamVector,
    data: &DatasetTable,
    ids: &[SampleId],
    noise: &NoiseSpec,
    plan: &RemovalBatchPlan,
    spec: &LossSpec,
) -> Result<(ParamVector, Vec<ParamVector>)> {
    check_removal(data, ids)?;
    if noise.sigma.is_nan() || noise.sigma < 0.0 {
        return Err(UnlearnError::InvalidConfig(format!("sigma must be nonnegative, got {}", noise.sigma)));
    }
    let mut batches = plan.batches(ids);
    if batches.is_empty() {
        // a lone Newton step on the full data
        batches.push(&[]);
    }
    let mut remaining = data.clone();
    let mut theta_u = theta.clone();
    let mut noise_terms = Vec::new();
    for (s, batch) in batches.into_iter().enumerate() {
        remaining = remaining.remove_rows(batch)?;
        let g = loss_gradient(&theta_u, &remaining, spec)?;
        let f = loss_hessian(&theta_u, &remaining, spec)?;
        theta_u = theta_u.sub(&newton_direction(&f, &g)?);
        if noise.sigma > 0.0 {
            let mut rng = noise.rng.derive_path(&[tags::FISHER_NOISE, s as u64]).rng();
            let mut b = normal_vec(&mut rng, data.p());
            b.push(0.0);
            let r = inverse_quarter_root(&f)?;
            let term = ParamVector::from_dvector(&(r * nalgebra::DVector::from_vec(b) * noise.sigma));
            theta_u = theta_u.add(&term);
            noise_terms.push(term);
        }
    }
    Ok((theta_u, noise_terms))
}

/// `θᵁ ← θᵁ − F⁻¹∇L(θᵁ, D′)` per batch, plus `σF^{-1/4}b` when `σ > 0`.
pub fn fisher_unlearn(
    theta: &ParamVector,
    data: &DatasetTable,
    ids: &[SampleId],
    noise: &NoiseSpec,
    plan: &RemovalBatchPlan,
    spec: &LossSpec,
) -> Result<ParamVector> {
    Ok(fisher_unlearn_traced(theta, data, ids, noise, plan, spec)?.0)
}

/// Influence removal: `θᵁ ← θᵁ + H⁻¹Δ` per batch with
/// `Δ = (m′/|D′|)·∇L(θᵁ, batch)` and `H` the Hessian on the remaining rows.
///
/// Losses here are means, so the batch gradient is rescaled by `m′/|D′|`;
/// with that factor one step lands exactly on the survivor optimum of a
/// quadratic objective.
pub fn influence_unlearn(
    theta: &ParamVector,
    data: &DatasetTable,
    ids: &[SampleId],
    plan: &RemovalBatchPlan,
    spec: &LossSpec,
) -> Result<ParamVector> {
    check_removal(data, ids)?;
    let mut remaining = data.clone();
    let mut theta_u = theta.clone();
    for batch in plan.batches(ids) {
        let removed = remaining.select_ids(batch)?;
        remaining = remaining.remove_rows(batch)?;
        let delta = loss_gradient(&theta_u, &removed, spec)?.scale(batch.len() as f64 / remaining.n() as f64);
        let h = loss_hessian(&theta_u, &remaining, spec)?;
        theta_u = theta_u.add(&newton_direction(&h, &delta)?);
    }
    Ok(theta_u)
}
