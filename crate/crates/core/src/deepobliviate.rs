//! Block-sequential training with partial retraining after a deletion.
//!
//! A deletion from block `d` retrains blocks `d, d+1, …` until the fitted
//! decay of the residual between original and retrained per-block updates
//! flattens, then stitches the untouched tail of the original trajectory onto
//! the retrained parameters.

use std::hash::Hasher;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};
use crate::dfa::{dfa_exponent, fit_amplitude, fit_power_law, AlphaSource, PowerLawFit, MIN_DFA_LEN};
use crate::error::{Result, UnlearnError};
use crate::loss::LossSpec;
use crate::params::ParamVector;
use crate::rng::{tags, RngStream};
use crate::trainer::{initial_params, train_from, Cost, TrainConfig};

/// Residuals needed before the fit, and hence the stopping test, is used.
pub const MIN_FIT_POINTS: usize = 3;

/// Stratified partition into `blocks` groups: each label group is shuffled,
/// the groups are concatenated and dealt round-robin. Rows inside a block keep
/// table order.
pub fn block_partition(data: &DatasetTable, blocks: usize, rng: RngStream) -> Result<Vec<Vec<SampleId>>> {
    if blocks == 0 || blocks > data.n() {
        return Err(UnlearnError::degenerate(format!("cannot split {} rows into {blocks} blocks", data.n())));
    }
    let mut r = rng.derive(tags::PARTITION).rng();
    let mut dealt: Vec<usize> = Vec::with_capacity(data.n());
    for label in 0..data.class_count() {
        let mut group: Vec<usize> = (0..data.n()).filter(|&i| data.label(i) == label).collect();
        group.shuffle(&mut r);
        dealt.extend(group);
    }
    let mut out = vec![Vec::new(); blocks];
    for (k, pos) in dealt.into_iter().enumerate() {
        out[k % blocks].push(pos);
    }
    Ok(out
        .into_iter()
        .map(|mut b| {
            b.sort_unstable();
            b.into_iter().map(|i| data.id(i)).collect()
        })
        .collect())
}

/// Order-sensitive digest of a parameter trajectory.
pub fn trajectory_checksum(params: &[ParamVector]) -> u64 {
    let mut h = std::hash::DefaultHasher::new();
    for theta in params {
        h.write_usize(theta.len());
        for v in theta.iter() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrainRun {
    pub blocks: Vec<Vec<SampleId>>,
    /// `θ_0..θ_B`.
    pub params: Vec<ParamVector>,
    pub spec: LossSpec,
    /// Training applied to each block in turn.
    pub cfg: TrainConfig,
    pub rng: RngStream,
    /// [`trajectory_checksum`] of `params` as last written by this module.
    pub checksum: u64,
}

impl BlockTrainRun {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn final_params(&self) -> &ParamVector {
        self.params.last().expect("a run holds θ_0")
    }

    /// 1-based index of the block holding `id`.
    pub fn block_of(&self, id: SampleId) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(&id)).map(|i| i + 1)
    }

    /// Fails when the stored trajectory no longer matches its checksum, e.g.
    /// after its coordinates were reordered.
    pub fn verify(&self) -> Result<()> {
        if trajectory_checksum(&self.params) != self.checksum {
            return Err(UnlearnError::HistoryMismatch("stored block parameters fail their checksum".into()));
        }
        Ok(())
    }

    fn block_stream(&self, i: usize) -> RngStream {
        block_stream(self.rng, i)
    }
}

fn block_stream(rng: RngStream, i: usize) -> RngStream {
    rng.derive_path(&[tags::BLOCK, i as u64])
}

/// Trains `block`, or passes `start` through when the block is empty.
fn train_block(
    data: &DatasetTable,
    ids: &[SampleId],
    spec: &LossSpec,
    cfg: &TrainConfig,
    rng: RngStream,
    start: ParamVector,
) -> Result<(ParamVector, u64)> {
    if ids.is_empty() {
        return Ok((start, 0));
    }
    let rows = data.select_ids(ids)?;
    let (theta, _) = train_from(&rows, spec, cfg, rng, start)?;
    Ok((theta, cfg.gradient_evals(rows.n())))
}

/// Trains on a fixed list of blocks in order from the configured init.
pub fn block_train_with_blocks(
    data: &DatasetTable,
    blocks: Vec<Vec<SampleId>>,
    spec: &LossSpec,
    cfg: &TrainConfig,
    rng: RngStream,
) -> Result<(BlockTrainRun, Cost)> {
    cfg.validate()?;
    spec.validate()?;
    let started = Instant::now();
    let mut params = vec![initial_params(data.p() + 1, cfg.init, rng)];
    let mut evals = 0;
    for (i, ids) in blocks.iter().enumerate() {
        let (theta, e) = train_block(data, ids, spec, cfg, block_stream(rng, i + 1), params[i].clone())?;
        params.push(theta);
        evals += e;
    }
    let checksum = trajectory_checksum(&params);
    let run = BlockTrainRun { blocks, params, spec: *spec, cfg: *cfg, rng, checksum };
    Ok((run, Cost { gradient_evals: evals, wall_seconds: started.elapsed().as_secs_f64() }))
}

pub fn block_train(
    data: &DatasetTable,
    blocks: usize,
    spec: &LossSpec,
    cfg: &TrainConfig,
    rng: RngStream,
) -> Result<(BlockTrainRun, Cost)> {
    let partition = block_partition(data, blocks, rng)?;
    block_train_with_blocks(data, partition, spec, cfg, rng)
}

/// `I(D_i | h_{i−1}) = θ_i − θ_{i−1}`.
pub fn temporal_influence(theta_i: &ParamVector, theta_prev: &ParamVector) -> Result<ParamVector> {
    theta_i.try_sub(theta_prev)
}

/// One appended residual with the fit in force right after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub x: usize,
    pub delta: f64,
    pub fitted: Option<f64>,
    pub slope: Option<f64>,
}

/// Residuals `Δ_x` at absolute block indices `x = d, d+1, …`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub start: usize,
    pub points: Vec<ResidualPoint>,
    pub fit: Option<PowerLawFit>,
}

impl ResidualSeries {
    pub fn new(start: usize) -> Self {
        Self { start, points: Vec::new(), fit: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last_x(&self) -> Option<usize> {
        self.points.last().map(|p| p.x)
    }

    /// Appends the next residual and refits.
    pub fn push(&mut self, delta: f64) -> Result<()> {
        if !delta.is_finite() || delta < 0.0 {
            return Err(UnlearnError::InvalidMeasurement(format!("residual must be finite and nonnegative, got {delta}")));
        }
        let x = self.start + self.points.len();
        self.points.push(ResidualPoint { x, delta, fitted: None, slope: None });
        self.fit = self.refit()?;
        if let Some(f) = self.fit {
            let last = self.points.last_mut().expect("just pushed");
            last.fitted = Some(f.value(x as f64));
            last.slope = Some(f.derivative(x as f64));
        }
        Ok(())
    }

    fn refit(&self) -> Result<Option<PowerLawFit>> {
        if self.points.len() < MIN_FIT_POINTS {
            return Ok(None);
        }
        let x: Vec<f64> = self.points.iter().map(|p| p.x as f64).collect();
        let y: Vec<f64> = self.points.iter().map(|p| p.delta).collect();
        if y.len() >= MIN_DFA_LEN {
            let alpha = dfa_exponent(&y)?.alpha;
            let (a, b, _) = fit_amplitude(&x, &y, alpha);
            return Ok(Some(PowerLawFit { a, alpha, b, source: AlphaSource::Dfa }));
        }
        Ok(Some(fit_power_law(&x, &y)))
    }

    /// `g`, the fitted slope at the newest index.
    pub fn slope(&self) -> Option<f64> {
        self.points.last().and_then(|p| p.slope)
    }

    pub fn should_stop(&self, eps: f64) -> bool {
        self.slope().is_some_and(|g| g.abs() < eps)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|f| f.to_string()).unwrap_or_default();
        let mut out = String::from("t,delta,fitted,g\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.x, p.delta, opt(p.fitted), opt(p.slope)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObliviateOutcome {
    pub model: ParamVector,
    /// Index of the last retrained block relative to the deleted sample's
    /// block: blocks `d..=d+t_stop` were retrained.
    pub t_stop: usize,
    pub cost: Cost,
    /// The run with `z` removed and its caches moved onto the returned model.
    pub run: BlockTrainRun,
    pub residuals: ResidualSeries,
}

/// Removes `z`, retraining from its block until `|g| < eps` or the blocks run
/// out.
pub fn deepobliviate_unlearn(run: &BlockTrainRun, data: &DatasetTable, z: SampleId, eps: f64) -> Result<ObliviateOutcome> {
    if eps.is_nan() || eps < 0.0 {
        return Err(UnlearnError::InvalidConfig(format!("eps must be nonnegative, got {eps}")));
    }
    run.verify()?;
    let d = run.block_of(z).ok_or(UnlearnError::MissingSample(z))?;
    let started = Instant::now();
    let big_b = run.block_count();
    let mut blocks = run.blocks.clone();
    blocks[d - 1].retain(|&id| id != z);

    let mut residuals = ResidualSeries::new(d);
    let mut retrained = vec![run.params[d - 1].clone()];
    let mut evals = 0;
    let mut last = d;
    for j in d..=big_b {
        let prev = retrained.last().expect("seeded with θ_{d−1}").clone();
        let (theta, e) = train_block(data, &blocks[j - 1], &run.spec, &run.cfg, run.block_stream(j), prev.clone())?;
        evals += e;
        let original = temporal_influence(&run.params[j], &run.params[j - 1])?;
        let updated = temporal_influence(&theta, &prev)?;
        residuals.push(original.sub(&updated).norm1())?;
        retrained.push(theta);
        last = j;
        if residuals.should_stop(eps) {
            break;
        }
    }

    let theta_u = retrained.last().expect("at least one block retrained").clone();
    let offset = theta_u.sub(&run.params[last]);
    let mut params = run.params[..d].to_vec();
    params.extend(retrained.into_iter().skip(1));
    for theta in &run.params[last + 1..] {
        params.push(theta.add(&offset));
    }
    let model = if last == big_b { theta_u } else { theta_u.add(&run.final_params().sub(&run.params[last])) };
    debug_assert_eq!(params.len(), big_b + 1);
    *params.last_mut().expect("nonempty") = model.clone();
    let checksum = trajectory_checksum(&params);
    let updated = BlockTrainRun { blocks, params, checksum, ..run.clone() };
    Ok(ObliviateOutcome {
        model,
        t_stop: last - d,
        cost: Cost { gradient_evals: evals, wall_seconds: started.elapsed().as_secs_f64() },
        run: updated,
        residuals,
    })
}
