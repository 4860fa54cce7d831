//! One interface over every removal mechanism: train, remove rows, and build
//! the matching from-scratch retrain used as the oracle.
//!
//! Costs are in each family's deterministic work unit: per-sample gradient
//! evaluations for the parametric methods and sample-node visits for DaRE.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::d2d::{pgd_unlearn, D2DConfig, D2DState};
use crate::dare::{dare_train, DareForest, DareParams};
use crate::data::{DatasetTable, SampleId};
use crate::deepobliviate::{block_train, block_train_with_blocks, deepobliviate_unlearn, BlockTrainRun};
use crate::deltagrad::{deltagrad_unlearn, DeltaGradConfig};
use crate::error::{Result, UnlearnError};
use crate::loss::LossSpec;
use crate::model::{Classifier, LinearModel};
use crate::params::ParamVector;
use crate::rng::RngStream;
use crate::secondorder::{fisher_unlearn, influence_unlearn, NoiseSpec, RemovalBatchPlan};
use crate::sisa::{sisa_train, sisa_train_with_assignment, sisa_unlearn, SisaConfig, SisaModel};
use crate::trainer::{train_gd, train_noisy, Cost, TrainConfig, TrainHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Naive { spec: LossSpec, train: TrainConfig },
    Sisa { spec: LossSpec, config: SisaConfig },
    Dare { params: DareParams },
    Fisher { spec: LossSpec, train: TrainConfig, sigma: f64, batch_size: Option<usize> },
    Influence { spec: LossSpec, train: TrainConfig, objective_sigma: f64, batch_size: Option<usize> },
    DeltaGrad { spec: LossSpec, train: TrainConfig, config: DeltaGradConfig },
    D2D { spec: LossSpec, train: TrainConfig, config: D2DConfig },
    DeepObliviate { spec: LossSpec, train: TrainConfig, blocks: usize, eps: f64 },
}

/// A trained model together with whatever state its mechanism needs.
#[derive(Clone, Debug)]
pub enum Trained {
    Linear {
        model: LinearModel,
        history: TrainHistory,
        /// The table `history` was recorded on.
        base: Arc<DatasetTable>,
        /// Rows removed since `history` was recorded.
        removed: Vec<SampleId>,
    },
    Sisa(SisaModel),
    Dare(DareForest),
    D2D { state: D2DState, spec: LossSpec },
    Blocks { run: BlockTrainRun },
}

impl Trained {
    /// Flat parameter vector, when the model has one. SISA concatenates its
    /// shard parameters.
    pub fn params(&self) -> Option<ParamVector> {
        match self {
            Trained::Linear { model, .. } => Some(model.params.clone()),
            Trained::Sisa(m) => Some(ParamVector::new(m.shard_params().into_iter().flat_map(|p| p.iter().copied()).collect())),
            Trained::Dare(_) => None,
            Trained::D2D { state, .. } => Some(state.published.clone()),
            Trained::Blocks { run } => Some(run.final_params().clone()),
        }
    }

    fn linear(spec: LossSpec, theta: ParamVector, history: TrainHistory, base: &DatasetTable) -> Self {
        Trained::Linear { model: LinearModel::new(theta, spec), history, base: Arc::new(base.clone()), removed: Vec::new() }
    }
}

impl Classifier for Trained {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        match self {
            Trained::Linear { model, .. } => model.predict_proba(x),
            Trained::Sisa(m) => m.predict_proba(x),
            Trained::Dare(f) => f.predict_proba(x),
            Trained::D2D { state, spec } => LinearModel::new(state.published.clone(), *spec).predict_proba(x),
            Trained::Blocks { run } => LinearModel::new(run.final_params().clone(), run.spec).predict_proba(x),
        }
    }

    fn predict_score(&self, x: &[f64]) -> f64 {
        match self {
            Trained::Linear { model, .. } => model.predict_score(x),
            Trained::D2D { state, spec } => LinearModel::new(state.published.clone(), *spec).predict_score(x),
            Trained::Blocks { run } => LinearModel::new(run.final_params().clone(), run.spec).predict_score(x),
            other => other.predict_proba(x),
        }
    }

    fn predict_label(&self, x: &[f64]) -> u32 {
        match self {
            Trained::Sisa(m) => m.predict_label(x),
            other => u32::from(other.predict_proba(x) > 0.5),
        }
    }

    fn class_probabilities(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Trained::Sisa(m) => m.class_probabilities(x),
            other => {
                let p = other.predict_proba(x);
                vec![1.0 - p, p]
            }
        }
    }
}

fn timed<T>(f: impl FnOnce() -> Result<(T, u64)>) -> Result<(T, Cost)> {
    let started = Instant::now();
    let (out, work) = f()?;
    Ok((out, Cost { gradient_evals: work, wall_seconds: started.elapsed().as_secs_f64() }))
}

fn plan(batch_size: Option<usize>) -> Result<RemovalBatchPlan> {
    batch_size.map_or(Ok(RemovalBatchPlan::single()), RemovalBatchPlan::new)
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive { .. } => "naive",
            Method::Sisa { .. } => "sisa",
            Method::Dare { .. } => "dare",
            Method::Fisher { .. } => "fisher",
            Method::Influence { .. } => "influence",
            Method::DeltaGrad { .. } => "deltagrad",
            Method::D2D { .. } => "d2d",
            Method::DeepObliviate { .. } => "deepobliviate",
        }
    }

    /// Whether the output is meant to equal the from-scratch retrain.
    pub fn is_exact(&self) -> bool {
        matches!(self, Method::Naive { .. } | Method::Sisa { .. } | Method::Dare { .. })
    }

    /// Whether deletions are served one id at a time.
    pub fn is_sequential(&self) -> bool {
        matches!(self, Method::Dare { .. } | Method::D2D { .. } | Method::DeepObliviate { .. })
    }

    /// Declared noise scale, recorded on reports.
    pub fn declared_sigma(&self) -> Option<f64> {
        match self {
            Method::Fisher { sigma, .. } => Some(*sigma),
            Method::Influence { objective_sigma, .. } => Some(*objective_sigma),
            Method::DeltaGrad { config, .. } => Some(config.post_noise),
            Method::D2D { config, .. } => Some(config.sigma),
            _ => None,
        }
    }

    pub fn train(&self, data: &DatasetTable, rng: RngStream) -> Result<(Trained, Cost)> {
        timed(|| match self {
            Method::Naive { spec, train }
            | Method::Fisher { spec, train, .. }
            | Method::DeltaGrad { spec, train, .. } => {
                let (theta, hist) = train_gd(data, spec, train, rng)?;
                Ok((Trained::linear(*spec, theta, hist, data), train.gradient_evals(data.n())))
            }
            Method::Influence { spec, train, objective_sigma, .. } => {
                let (theta, hist, _) = train_noisy(data, spec, *objective_sigma, train, rng)?;
                Ok((Trained::linear(*spec, theta, hist, data), train.gradient_evals(data.n())))
            }
            Method::Sisa { spec, config } => {
                let m = sisa_train(data, spec, config, rng)?;
                let work = m.full_train_evals();
                Ok((Trained::Sisa(m), work))
            }
            Method::Dare { params } => {
                let f = dare_train(data, *params, rng)?;
                let work = f.training_work();
                Ok((Trained::Dare(f), work))
            }
            Method::D2D { spec, train, config } => {
                let (theta, _) = train_gd(data, spec, train, rng)?;
                let state = D2DState::new(theta, data.clone(), config)?;
                Ok((Trained::D2D { state, spec: *spec }, train.gradient_evals(data.n())))
            }
            Method::DeepObliviate { spec, train, blocks, .. } => {
                let (run, cost) = block_train(data, *blocks, spec, train, rng)?;
                Ok((Trained::Blocks { run }, cost.gradient_evals))
            }
        })
    }

    /// Removes `ids` from a model trained on `data`.
    pub fn unlearn(&self, trained: &Trained, data: &DatasetTable, ids: &[SampleId], rng: RngStream) -> Result<(Trained, Cost)> {
        let mismatch = || UnlearnError::InvalidConfig(format!("model state does not belong to method {}", self.name()));
        match (self, trained) {
            (Method::Naive { .. }, _) => self.naive(trained, data, ids, rng),
            (Method::Sisa { .. }, Trained::Sisa(m)) => {
                let (next, cost) = sisa_unlearn(m, data, ids)?;
                Ok((Trained::Sisa(next), cost))
            }
            (Method::Dare { .. }, Trained::Dare(f)) => timed(|| {
                let mut next = f.clone();
                let mut work = 0;
                for &z in ids {
                    work += next.delete(z)?.work();
                }
                Ok((Trained::Dare(next), work))
            }),
            (Method::Fisher { spec, sigma, batch_size, .. }, Trained::Linear { model, history, base, removed }) => timed(|| {
                let noise = NoiseSpec { sigma: *sigma, rng };
                let theta = fisher_unlearn(&model.params, data, ids, &noise, &plan(*batch_size)?, spec)?;
                let work = newton_work(data.n(), ids.len(), plan(*batch_size)?);
                Ok((relinear(*spec, theta, history, base, removed, ids), work))
            }),
            (Method::Influence { spec, batch_size, .. }, Trained::Linear { model, history, base, removed }) => timed(|| {
                let theta = influence_unlearn(&model.params, data, ids, &plan(*batch_size)?, spec)?;
                let work = newton_work(data.n(), ids.len(), plan(*batch_size)?);
                Ok((relinear(*spec, theta, history, base, removed, ids), work))
            }),
            (Method::DeltaGrad { spec, config, .. }, Trained::Linear { history, base, removed, .. }) => {
                // replays against the recorded table with every removal so far
                let mut all = removed.clone();
                all.extend_from_slice(ids);
                let (theta, report) = deltagrad_unlearn(history, base, &all, config, rng)?;
                let next = Trained::Linear {
                    model: LinearModel::new(theta, *spec),
                    history: history.clone(),
                    base: Arc::clone(base),
                    removed: all,
                };
                Ok((next, report.cost))
            }
            (Method::D2D { spec, config, .. }, Trained::D2D { state, .. }) => timed(|| {
                let mut s = state.clone();
                let mut work = 0;
                for &z in ids {
                    s = pgd_unlearn(&s, z, spec, &config.schedule, rng)?;
                    work += s.cost.gradient_evals;
                }
                Ok((Trained::D2D { state: s, spec: *spec }, work))
            }),
            (Method::DeepObliviate { eps, .. }, Trained::Blocks { run }) => timed(|| {
                let mut r = run.clone();
                let mut work = 0;
                for &z in ids {
                    let out = deepobliviate_unlearn(&r, data, z, *eps)?;
                    work += out.cost.gradient_evals;
                    r = out.run;
                }
                Ok((Trained::Blocks { run: r }, work))
            }),
            _ => Err(mismatch()),
        }
    }

    /// The from-scratch retrain on `data` minus `ids` under the same seeds.
    /// SISA keeps the surviving rows in their original shards and slices.
    pub fn naive(&self, trained: &Trained, data: &DatasetTable, ids: &[SampleId], rng: RngStream) -> Result<(Trained, Cost)> {
        let survivors = data.remove_rows(ids)?;
        if survivors.is_empty() {
            return Err(UnlearnError::degenerate("every sample was removed"));
        }
        match (self, trained) {
            (Method::Sisa { spec, config }, Trained::Sisa(m)) => timed(|| {
                let next = sisa_train_with_assignment(data, spec, config, m.assignment_without(ids), rng)?;
                let work = next.full_train_evals();
                Ok((Trained::Sisa(next), work))
            }),
            (Method::DeepObliviate { spec, train, .. }, Trained::Blocks { run }) => timed(|| {
                let mut blocks = run.blocks.clone();
                for b in &mut blocks {
                    b.retain(|id| !ids.contains(id));
                }
                let (next, cost) = block_train_with_blocks(data, blocks, spec, train, rng)?;
                Ok((Trained::Blocks { run: next }, cost.gradient_evals))
            }),
            _ => self.train(&survivors, rng),
        }
    }
}

/// Per-sample gradient and Hessian evaluations of the Newton removals: one
/// pass over the shrinking table per batch.
fn newton_work(n: usize, m: usize, plan: RemovalBatchPlan) -> u64 {
    let batches = plan.batch_count(m).max(1);
    let mut left = n;
    let mut work = 0;
    for s in 0..batches {
        let size = (m - (s * plan.batch_size).min(m)).min(plan.batch_size);
        left -= size;
        work += 2 * left as u64 + size as u64;
    }
    work
}

fn relinear(
    spec: LossSpec,
    theta: ParamVector,
    history: &TrainHistory,
    base: &Arc<DatasetTable>,
    removed: &[SampleId],
    ids: &[SampleId],
) -> Trained {
    let mut all = removed.to_vec();
    all.extend_from_slice(ids);
    Trained::Linear { model: LinearModel::new(theta, spec), history: history.clone(), base: Arc::clone(base), removed: all }
}
