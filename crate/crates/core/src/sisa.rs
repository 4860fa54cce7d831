//! Sharded, isolated, sliced and aggregated training with exact removal.
//!
//! Rows are dealt into `S` shards and each shard into `R` slices. Shard `i`
//! trains incrementally: step `j` continues from checkpoint `j − 1` on the
//! union of slices `1..=j` for `e_j` epochs, and every intermediate state is
//! kept. Removing a row retrains only its shard, starting from the checkpoint
//! just before the earliest affected slice.
//!
//! Each resume point `(shard, slice)` owns its own derived random stream, so
//! retraining after a removal draws exactly what a from-scratch run on the
//! surviving rows (with the same assignment) would draw.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::loss::{loss_gradient, LossSpec};
use crate::model::{Classifier, LinearModel};
use crate::params::ParamVector;
use crate::rng::{tags, RngStream};
use crate::trainer::{initial_params, train_from, Cost, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MajorityVote,
    MeanProbability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SisaConfig {
    pub shards: usize,
    pub slices: usize,
    pub epochs_per_slice: Vec<usize>,
    /// Schedule, batching and initialization for every slice step; `steps`
    /// is replaced by the slice's epoch count.
    pub train: TrainConfig,
    pub aggregation: Aggregation,
}

impl SisaConfig {
    pub fn new(shards: usize, slices: usize, epochs: usize, train: TrainConfig) -> Self {
        Self {
            shards,
            slices,
            epochs_per_slice: vec![epochs; slices],
            train,
            aggregation: Aggregation::MajorityVote,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shards == 0 || self.slices == 0 {
            return Err(UnlearnError::InvalidConfig("shard and slice counts must be positive".into()));
        }
        if self.epochs_per_slice.len() != self.slices {
            return Err(UnlearnError::InvalidConfig(format!(
                "{} epoch counts for {} slices",
                self.epochs_per_slice.len(),
                self.slices
            )));
        }
        if self.epochs_per_slice.contains(&0) {
            return Err(UnlearnError::InvalidConfig("epochs per slice must be positive".into()));
        }
        self.train.validate()
    }

    fn slice_config(&self, j: usize) -> TrainConfig {
        TrainConfig { steps: self.epochs_per_slice[j], ..self.train }
    }
}

/// Ids of every `[shard][slice]`, in training order.
pub type SliceAssignment = Vec<Vec<Vec<SampleId>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SisaModel {
    pub config: SisaConfig,
    pub spec: LossSpec,
    pub rng: RngStream,
    pub assignment: SliceAssignment,
    /// `checkpoints[i][j]` is shard `i` after `j` slice steps; index 0 is
    /// the initialization.
    pub checkpoints: Vec<Vec<ParamVector>>,
    pub index_map: BTreeMap<SampleId, (usize, usize)>,
}

/// Random stream owned by the resume point `(shard, slice)`.
pub fn resume_stream(rng: RngStream, shard: usize, slice: usize) -> RngStream {
    rng.derive_path(&[tags::SHARD_SLICE, shard as u64, slice as u64])
}

/// Shuffles the ids and deals them round-robin: the `k`-th shuffled id goes
/// to shard `k mod S` and slice `⌊k/S⌋ mod R`.
pub fn partition(ids: &[SampleId], shards: usize, slices: usize, rng: RngStream) -> SliceAssignment {
    let mut order = ids.to_vec();
    order.shuffle(&mut rng.derive(tags::PARTITION).rng());
    let mut out = vec![vec![Vec::new(); slices]; shards];
    for (k, id) in order.into_iter().enumerate() {
        out[k % shards][(k / shards) % slices].push(id);
    }
    out
}

fn cumulative_ids(slices: &[Vec<SampleId>], upto: usize) -> Vec<SampleId> {
    slices[..upto].iter().flatten().copied().collect()
}

/// Trains one shard from checkpoint `from` onward, returning the new tail of
/// checkpoints and the gradient evaluations spent. An empty cumulative union
/// leaves the checkpoint unchanged.
#[allow(clippy::too_many_arguments)]
fn train_shard_from(
    data: &DatasetTable,
    spec: &LossSpec,
    config: &SisaConfig,
    rng: RngStream,
    shard: usize,
    slices: &[Vec<SampleId>],
    start: ParamVector,
    from: usize,
) -> Result<(Vec<ParamVector>, u64)> {
    let mut theta = start;
    let mut out = Vec::with_capacity(config.slices - from);
    let mut evals = 0;
    for j in from..config.slices {
        let union = cumulative_ids(slices, j + 1);
        if !union.is_empty() {
            let table = data.select_ids(&union)?;
            let cfg = config.slice_config(j);
            theta = train_from(&table, spec, &cfg, resume_stream(rng, shard, j + 1), theta)?.0;
            evals += cfg.gradient_evals(table.n());
        }
        out.push(theta.clone());
    }
    Ok((out, evals))
}

fn run_shards<T: Send>(count: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if count == 1 {
        return vec![f(0)];
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..count).map(|i| s.spawn({
            let f = &f;
            move || f(i)
        })).collect();
        handles.into_iter().map(|h| h.join().expect("shard worker panicked")).collect()
    })
}

/// Trains every shard under a given assignment. Used both for fresh training
/// and as the from-scratch oracle for removals.
pub fn sisa_train_with_assignment(
    data: &DatasetTable,
    spec: &LossSpec,
    config: &SisaConfig,
    assignment: SliceAssignment,
    rng: RngStream,
) -> Result<SisaModel> {
    config.validate()?;
    if assignment.len() != config.shards || assignment.iter().any(|s| s.len() != config.slices) {
        return Err(UnlearnError::InvalidConfig("assignment does not match shard/slice counts".into()));
    }
    let dim = data.p() + 1;
    let trained = run_shards(config.shards, |i| {
        let init = initial_params(dim, config.train.init, resume_stream(rng, i, 0));
        let (tail, _) = train_shard_from(data, spec, config, rng, i, &assignment[i], init.clone(), 0)?;
        let mut cps = vec![init];
        cps.extend(tail);
        Ok::<_, UnlearnError>(cps)
    });
    let checkpoints = trained.into_iter().collect::<Result<Vec<_>>>()?;
    let mut index_map = BTreeMap::new();
    for (i, shard) in assignment.iter().enumerate() {
        for (j, slice) in shard.iter().enumerate() {
            for &id in slice {
                index_map.insert(id, (i, j));
            }
        }
    }
    Ok(SisaModel {
        config: config.clone(),
        spec: *spec,
        rng,
        assignment,
        checkpoints,
        index_map,
    })
}

pub fn sisa_train(data: &DatasetTable, spec: &LossSpec, config: &SisaConfig, rng: RngStream) -> Result<SisaModel> {
    config.validate()?;
    if data.n() < config.shards * config.slices {
        return Err(UnlearnError::degenerate(format!(
            "{} rows cannot fill {} shards × {} slices",
            data.n(),
            config.shards,
            config.slices
        )));
    }
    let assignment = partition(data.ids(), config.shards, config.slices, rng);
    sisa_train_with_assignment(data, spec, config, assignment, rng)
}

/// Removes `ids`, retraining each affected shard from the checkpoint before
/// its earliest affected slice.
pub fn sisa_unlearn(model: &SisaModel, data: &DatasetTable, ids: &[SampleId]) -> Result<(SisaModel, Cost)> {
    let started = Instant::now();
    let mut earliest: BTreeMap<usize, usize> = BTreeMap::new();
    for &id in ids {
        let &(i, j) = model.index_map.get(&id).ok_or(UnlearnError::MissingSample(id))?;
        let e = earliest.entry(i).or_insert(j);
        *e = (*e).min(j);
    }
    let mut next = model.clone();
    let drop: std::collections::HashSet<SampleId> = ids.iter().copied().collect();
    for &i in earliest.keys() {
        for slice in &mut next.assignment[i] {
            slice.retain(|id| !drop.contains(id));
        }
    }
    for id in ids {
        next.index_map.remove(id);
    }
    let affected: Vec<(usize, usize)> = earliest.into_iter().collect();
    let results = run_shards(affected.len(), |k| {
        let (i, r) = affected[k];
        let start = next.checkpoints[i][r].clone();
        train_shard_from(data, &next.spec, &next.config, next.rng, i, &next.assignment[i], start, r)
    });
    let mut evals = 0;
    for (&(i, r), res) in affected.iter().zip(results) {
        let (tail, e) = res?;
        next.checkpoints[i].truncate(r + 1);
        next.checkpoints[i].extend(tail);
        evals += e;
    }
    let cost = Cost { gradient_evals: evals, wall_seconds: started.elapsed().as_secs_f64() };
    Ok((next, cost))
}

impl SisaModel {
    pub fn shard_model(&self, i: usize) -> LinearModel {
        LinearModel::new(self.checkpoints[i][self.config.slices].clone(), self.spec)
    }

    pub fn shard_params(&self) -> Vec<&ParamVector> {
        self.checkpoints.iter().map(|c| &c[self.config.slices]).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.index_map.keys().copied()
    }

    /// Assignment of the rows that survive removing `ids`, for use with
    /// [`sisa_train_with_assignment`].
    pub fn assignment_without(&self, ids: &[SampleId]) -> SliceAssignment {
        let drop: std::collections::HashSet<SampleId> = ids.iter().copied().collect();
        self.assignment
            .iter()
            .map(|shard| {
                shard.iter().map(|s| s.iter().copied().filter(|id| !drop.contains(id)).collect()).collect()
            })
            .collect()
    }

    /// Gradient evaluations to retrain shard `i` from slice step `j`
    /// (0-based) onward under the current assignment.
    pub fn retrain_evals(&self, shard: usize, slice: usize) -> u64 {
        (slice..self.config.slices)
            .map(|l| {
                let rows = cumulative_ids(&self.assignment[shard], l + 1).len();
                self.config.slice_config(l).gradient_evals(rows)
            })
            .sum()
    }

    /// Gradient evaluations of training every shard from scratch.
    pub fn full_train_evals(&self) -> u64 {
        (0..self.config.shards).map(|i| self.retrain_evals(i, 0)).sum()
    }

    /// Expected speed-up over full retraining for one uniformly drawn
    /// deletion, under the gradient-evaluation cost model.
    pub fn expected_single_deletion_speedup(&self) -> f64 {
        let n = self.index_map.len() as f64;
        let expected: f64 = self
            .index_map
            .values()
            .map(|&(i, j)| self.retrain_evals(i, j) as f64 / n)
            .sum();
        self.full_train_evals() as f64 / expected
    }

    /// Writes `index_map.csv`, `model.json` and one single-record history file
    /// per checkpoint. The record's gradient is taken on the rows the next
    /// (or, for the last checkpoint, the final) slice step trains on.
    pub fn save(&self, data: &DatasetTable, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("id,shard,slice\n");
        for (id, (i, j)) in &self.index_map {
            writeln!(csv, "{},{},{}", id.0, i, j).expect("writing to a string");
        }
        std::fs::write(dir.join("index_map.csv"), csv)?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| UnlearnError::Format(e.to_string()))?;
        std::fs::write(dir.join("model.json"), json)?;
        for (i, cps) in self.checkpoints.iter().enumerate() {
            for (j, theta) in cps.iter().enumerate() {
                let union = cumulative_ids(&self.assignment[i], (j + 1).min(self.config.slices));
                let grad = if union.is_empty() {
                    ParamVector::zeros(theta.len())
                } else {
                    loss_gradient(theta, &data.select_ids(&union)?, &self.spec)?
                };
                let record = TrainHistory {
                    params: vec![theta.clone()],
                    grads: vec![grad],
                    config: TrainConfig { steps: 0, ..self.config.train },
                    spec: self.spec,
                    rng: resume_stream(self.rng, i, j),
                    noise_sigma: 0.0,
                };
                record.write(&dir.join(format!("shard{i:03}_slice{j:03}.ukh")))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = std::fs::read(dir.join("model.json"))?;
        let mut model: SisaModel =
            serde_json::from_slice(&bytes).map_err(|e| UnlearnError::Format(e.to_string()))?;
        for (i, cps) in model.checkpoints.iter_mut().enumerate() {
            for (j, theta) in cps.iter_mut().enumerate() {
                let rec = TrainHistory::read(&dir.join(format!("shard{i:03}_slice{j:03}.ukh")))?;
                if rec.params.len() != 1 {
                    return Err(UnlearnError::Format("checkpoint file must hold one record".into()));
                }
                *theta = rec.params[0].clone();
            }
        }
        Ok(model)
    }
}

/// Upper bound `(R + 1)·S/2` on the speed-up of a single deletion.
pub fn theoretical_speedup_bound(shards: usize, slices: usize) -> f64 {
    (slices as f64 + 1.0) * shards as f64 / 2.0
}

/// Aggregated label and class-probability vector.
pub fn sisa_predict(model: &SisaModel, x: &[f64]) -> Result<(u32, Vec<f64>)> {
    let p = model.checkpoints[0][0].len() - 1;
    if x.len() != p {
        return Err(UnlearnError::shape(p, x.len()));
    }
    let s = model.config.shards as f64;
    match model.config.aggregation {
        Aggregation::MajorityVote => {
            let mut votes = [0usize; 2];
            for i in 0..model.config.shards {
                votes[model.shard_model(i).predict_label(x) as usize] += 1;
            }
            let label = u32::from(votes[1] > votes[0]);
            Ok((label, vec![votes[0] as f64 / s, votes[1] as f64 / s]))
        }
        Aggregation::MeanProbability => {
            let mut mean = 0.0;
            for i in 0..model.config.shards {
                mean += model.shard_model(i).predict_proba(x);
            }
            mean /= s;
            Ok((u32::from(mean > 0.5), vec![1.0 - mean, mean]))
        }
    }
}

impl Classifier for SisaModel {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        sisa_predict(self, x).expect("row width matches the model").1[1]
    }

    fn predict_label(&self, x: &[f64]) -> u32 {
        sisa_predict(self, x).expect("row width matches the model").0
    }
}
