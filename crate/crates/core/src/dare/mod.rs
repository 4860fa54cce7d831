//! Data-removal-enabled random forests.
//!
//! Each tree has random split nodes above depth `d_rmax` and greedy nodes
//! below it. A greedy node keeps, for up to `p̃` attributes, up to `k` sampled
//! valid thresholds with the statistics needed to recompute their Gini score
//! and detect when they stop being valid. Deleting a sample walks its path,
//! updates those statistics, and rebuilds a subtree only when the node's best
//! split changes (greedy) or its threshold leaves the attribute range
//! (random).
//!
//! Cost is counted in sample-node visits: building a node over `n` samples
//! costs `n`, as does gathering a node's samples during a deletion, and
//! passing a deleted sample through a node costs one.

mod audit;
mod io;
mod node;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::model::Classifier;
use crate::rng::{tags, RngStream};

pub use audit::{audit_forest, AuditEntry, AuditReport};
pub use node::{AttributeCandidates, DareNode, NodeKind, ThresholdStats};

use node::{Builder, DeleteCtx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DareParams {
    pub trees: usize,
    pub d_max: usize,
    pub d_rmax: usize,
    /// Thresholds sampled per attribute.
    pub k: usize,
    /// Attributes considered per greedy node.
    pub p_tilde: usize,
}

impl DareParams {
    fn validate(&self, p: usize) -> Result<()> {
        if self.trees == 0 || self.k == 0 || self.p_tilde == 0 {
            return Err(UnlearnError::InvalidConfig("trees, k and p_tilde must be positive".into()));
        }
        if self.p_tilde > p {
            return Err(UnlearnError::InvalidConfig(format!("p_tilde = {} exceeds p = {p}", self.p_tilde)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DareTree {
    pub root: DareNode,
    pub rng: RngStream,
    /// Number of random decisions taken so far; each one draws from
    /// `rng.derive(ops)`.
    pub ops: u64,
}

/// Work done by a deletion. `work()` is the sample-node visit total that is
/// comparable with [`DareForest::training_work`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DareCost {
    pub nodes_visited: u64,
    pub stats_updated: u64,
    pub samples_gathered: u64,
    pub nodes_retrained: u64,
    pub samples_retrained: u64,
    pub wall_seconds: f64,
}

impl DareCost {
    pub fn work(&self) -> u64 {
        self.nodes_visited + self.samples_gathered + self.samples_retrained
    }

    pub fn add(&mut self, o: &DareCost) {
        self.nodes_visited += o.nodes_visited;
        self.stats_updated += o.stats_updated;
        self.samples_gathered += o.samples_gathered;
        self.nodes_retrained += o.nodes_retrained;
        self.samples_retrained += o.samples_retrained;
        self.wall_seconds += o.wall_seconds;
    }
}

/// A forest together with the table it was trained on. Deleted rows stay in
/// the table but are marked dead.
#[derive(Clone, Debug, PartialEq)]
pub struct DareForest {
    pub params: DareParams,
    pub trees: Vec<DareTree>,
    data: Arc<DatasetTable>,
    alive: Vec<bool>,
}

fn check_binary(data: &DatasetTable) -> Result<()> {
    if data.labels().iter().any(|&y| y > 1) {
        return Err(UnlearnError::InvalidConfig("DaRE forests need binary labels".into()));
    }
    Ok(())
}

pub fn dare_train(data: &DatasetTable, params: DareParams, rng: RngStream) -> Result<DareForest> {
    if data.is_empty() {
        return Err(UnlearnError::degenerate("training a forest on an empty table"));
    }
    params.validate(data.p())?;
    check_binary(data)?;
    let data = Arc::new(data.clone());
    let alive = vec![true; data.n()];
    let positions: Vec<u32> = (0..data.n() as u32).collect();
    let trees = std::thread::scope(|s| {
        let handles: Vec<_> = (0..params.trees)
            .map(|t| {
                let data = &data;
                let positions = &positions;
                s.spawn(move || {
                    let stream = rng.derive_path(&[tags::DARE_TREE, t as u64]);
                    let mut b = Builder::new(data, &params, stream, 0);
                    let root = b.build(positions.clone(), 0);
                    DareTree { root, rng: stream, ops: b.ops }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("tree worker panicked")).collect()
    });
    Ok(DareForest { params, trees, data, alive })
}

/// Mean leaf value over the trees.
pub fn dare_predict(forest: &DareForest, x: &[f64]) -> Result<f64> {
    if x.len() != forest.data.p() {
        return Err(UnlearnError::shape(forest.data.p(), x.len()));
    }
    let sum: f64 = forest.trees.iter().map(|t| t.root.predict(x)).sum();
    Ok(sum / forest.trees.len() as f64)
}

/// Deletes `z` from a copy of the forest.
pub fn dare_unlearn(forest: &DareForest, z: SampleId) -> Result<(DareForest, DareCost)> {
    let mut next = forest.clone();
    let cost = next.delete(z)?;
    Ok((next, cost))
}

impl DareForest {
    /// Assembles a forest from parts, e.g. hand-built trees in tests.
    pub fn from_parts(params: DareParams, trees: Vec<DareTree>, data: DatasetTable) -> Self {
        let alive = vec![true; data.n()];
        Self { params, trees, data: Arc::new(data), alive }
    }

    pub fn data(&self) -> &DatasetTable {
        &self.data
    }

    pub fn is_alive(&self, id: SampleId) -> bool {
        self.data.position(id).is_some_and(|i| self.alive[i])
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// The surviving training rows.
    pub fn alive_table(&self) -> DatasetTable {
        let keep: Vec<usize> = (0..self.data.n()).filter(|&i| self.alive[i]).collect();
        self.data.select_positions(&keep)
    }

    pub(crate) fn alive_flags(&self) -> &[bool] {
        &self.alive
    }

    /// Sample-node visits of building every tree from scratch on the
    /// surviving rows, counted from the current structure.
    pub fn training_work(&self) -> u64 {
        self.trees.iter().map(|t| t.root.total_samples()).sum()
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(|t| t.root.node_count()).sum()
    }

    /// Number of random (top) split nodes across all trees.
    pub fn random_node_count(&self) -> usize {
        self.trees.iter().map(|t| t.root.random_node_count()).sum()
    }

    /// In-place deletion of one training row.
    pub fn delete(&mut self, z: SampleId) -> Result<DareCost> {
        let started = Instant::now();
        let pos = self.data.position(z).ok_or(UnlearnError::MissingSample(z))?;
        if !self.alive[pos] {
            return Err(UnlearnError::MissingSample(z));
        }
        self.alive[pos] = false;
        let data = Arc::clone(&self.data);
        let alive = &self.alive;
        let params = self.params;
        let costs: Vec<DareCost> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .trees
                .iter_mut()
                .map(|tree| {
                    let data = &data;
                    s.spawn(move || {
                        let mut ctx = DeleteCtx::new(data, alive, &params, tree.rng, tree.ops);
                        ctx.delete(&mut tree.root, pos as u32);
                        tree.ops = ctx.ops;
                        ctx.cost
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("tree worker panicked")).collect()
        });
        let mut total = DareCost::default();
        for c in &costs {
            total.add(c);
        }
        total.wall_seconds = started.elapsed().as_secs_f64();
        Ok(total)
    }
}

impl Classifier for DareForest {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        dare_predict(self, x).expect("row width matches the forest")
    }
}

#[cfg(test)]
mod tests;
