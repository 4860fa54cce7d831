//! Removal by replaying the cached training trajectory with quasi-Newton
//! corrections in place of most survivor-gradient evaluations.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::loss::{finish_gradient, gradient_sum, sample_gradient};
use crate::params::ParamVector;
use crate::rng::{normal_vec, tags, RngStream};
use crate::trainer::{gd_step, BatchMode, Cost, TrainHistory};

/// Pairs whose curvature `sᵀy` falls at or below this are skipped.
pub const CURVATURE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaGradConfig {
    /// Number of leading steps computed exactly (`j0`).
    pub burn_in: usize,
    /// After burn-in, every `period`-th step is exact (`T0`).
    pub period: usize,
    /// Correction pairs kept for the quasi-Hessian (`k`).
    pub history_size: usize,
    /// Scale of Gaussian noise added to the weights after the replay.
    pub post_noise: f64,
}

impl DeltaGradConfig {
    pub fn new(burn_in: usize, period: usize, history_size: usize) -> Self {
        Self { burn_in, period, history_size, post_noise: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == 0 || self.history_size == 0 {
            return Err(UnlearnError::InvalidConfig("period and history size must be positive".into()));
        }
        if !self.post_noise.is_finite() || self.post_noise < 0.0 {
            return Err(UnlearnError::InvalidConfig(format!("post noise must be nonnegative, got {}", self.post_noise)));
        }
        Ok(())
    }

    pub fn is_exact_step(&self, t: usize) -> bool {
        t < self.burn_in || (t - self.burn_in).is_multiple_of(self.period)
    }

    /// `j0 + ⌈(T − j0)/T0⌉`, capped at `T`.
    pub fn exact_step_count(&self, steps: usize) -> usize {
        if steps <= self.burn_in {
            steps
        } else {
            self.burn_in + (steps - self.burn_in).div_ceil(self.period)
        }
    }
}

/// Gradient differences `y` and parameter differences `s` from exact steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrectionBuffers {
    pub dg: VecDeque<ParamVector>,
    pub dtheta: VecDeque<ParamVector>,
}

impl CorrectionBuffers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.dg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dg.is_empty()
    }

    /// Appends a pair, keeping at most `capacity` of the newest.
    pub fn push(&mut self, dg: ParamVector, dtheta: ParamVector, capacity: usize) {
        self.dg.push_back(dg);
        self.dtheta.push_back(dtheta);
        while self.dg.len() > capacity {
            self.dg.pop_front();
            self.dtheta.pop_front();
        }
    }
}

/// `B·v` for the limited-memory BFGS matrix built from the newest `k` usable
/// pairs, in compact form
/// `B = σI − [σS Y] M⁻¹ [σSᵀ; Yᵀ]` with `M = [[σSᵀS, L], [Lᵀ, −D]]`.
pub fn quasi_hessian_product(buffers: &CorrectionBuffers, v: &ParamVector, k: usize) -> Result<ParamVector> {
    let pairs: Vec<(&ParamVector, &ParamVector)> = buffers
        .dtheta
        .iter()
        .zip(buffers.dg.iter())
        .rev()
        .take(k)
        .filter(|(s, y)| s.dot(y) > CURVATURE_FLOOR)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    let Some(&(s_last, y_last)) = pairs.last() else {
        return Err(UnlearnError::EmptyHistory);
    };
    if v.len() != s_last.len() {
        return Err(UnlearnError::shape(s_last.len(), v.len()));
    }
    let sigma = y_last.dot(y_last) / s_last.dot(y_last);
    let m = pairs.len();
    let mut big = DMatrix::<f64>::zeros(2 * m, 2 * m);
    for i in 0..m {
        for j in 0..m {
            big[(i, j)] = sigma * pairs[i].0.dot(pairs[j].0);
            if i > j {
                let l = pairs[i].0.dot(pairs[j].1);
                big[(i, m + j)] = l;
                big[(m + j, i)] = l;
            }
        }
        big[(m + i, m + i)] = -pairs[i].0.dot(pairs[i].1);
    }
    let mut rhs = DVector::<f64>::zeros(2 * m);
    for i in 0..m {
        rhs[i] = sigma * pairs[i].0.dot(v);
        rhs[m + i] = pairs[i].1.dot(v);
    }
    let coef = big
        .lu()
        .solve(&rhs)
        .ok_or(UnlearnError::SingularCurvature { min_eigenvalue: 0.0 })?;
    let mut out = v.scale(sigma);
    for i in 0..m {
        out.axpy(-sigma * coef[i], pairs[i].0);
        out.axpy(-coef[m + i], pairs[i].1);
    }
    Ok(out)
}

/// Bookkeeping for one replay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaGradCost {
    /// Steps at which the gradient was evaluated on every row.
    pub exact_steps: usize,
    /// Per-sample gradient evaluations across all steps, plus wall time.
    pub cost: Cost,
}

fn check_history(history: &TrainHistory, data: &DatasetTable) -> Result<()> {
    let bad = |why: &str| Err(UnlearnError::HistoryMismatch(why.into()));
    if history.config.batch != BatchMode::Full {
        return bad("replay requires a full-batch training history");
    }
    if history.noise_sigma != 0.0 {
        return bad("replay of noisy-objective histories is unsupported");
    }
    if history.dim() != data.p() + 1 {
        return bad("history dimension does not match the data");
    }
    if history.params.len() != history.config.steps + 1 || history.grads.len() != history.params.len() {
        return bad("history is incomplete");
    }
    Ok(())
}

fn add_sums(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Replays the cached trajectory without the rows in `ids`.
///
/// Exact steps take the survivor gradient directly and record a correction
/// pair; the rest approximate it as
/// `(n·(∇L(θ_t) + B(θᵁ_t − θ_t)) − Σ_{i∈M} ∇ℓ_i(θᵁ_t)) / (n − m)`.
pub fn deltagrad_unlearn(
    history: &TrainHistory,
    data: &DatasetTable,
    ids: &[SampleId],
    cfg: &DeltaGradConfig,
    rng: RngStream,
) -> Result<(ParamVector, DeltaGradCost)> {
    cfg.validate()?;
    check_history(history, data)?;
    let started = Instant::now();
    let n = data.n();
    let removed = data.positions_of(ids)?;
    let mut is_removed = vec![false; n];
    for &i in &removed {
        if std::mem::replace(&mut is_removed[i], true) {
            return Err(UnlearnError::MissingSample(data.id(i)));
        }
    }
    let m = removed.len();
    if m >= n {
        return Err(UnlearnError::degenerate("every sample was removed"));
    }
    let survivors: Vec<usize> = (0..n).filter(|&i| !is_removed[i]).collect();
    let spec = &history.spec;
    let steps = history.steps();
    let (nf, keep) = (n as f64, (n - m) as f64);

    let mut report = DeltaGradCost::default();
    let mut buffers = CorrectionBuffers::new();
    let mut theta = history.initial().clone();
    for t in 0..steps {
        let eta = history.config.schedule.eta(t);
        let cached = &history.grads[t];
        let delta = theta.sub(&history.params[t]);
        let moved = delta.iter().any(|&v| v != 0.0);
        let g = if m == 0 {
            cached.clone()
        } else if cfg.is_exact_step(t) {
            report.exact_steps += 1;
            report.cost.gradient_evals += n as u64;
            let kept = gradient_sum(&theta, data, &survivors, spec);
            let gone = gradient_sum(&theta, data, &removed, spec);
            if moved {
                let full = finish_gradient(&add_sums(&kept, &gone), n, &theta, spec);
                buffers.push(full.sub(cached), delta, cfg.history_size);
            }
            finish_gradient(&kept, n - m, &theta, spec)
        } else {
            report.cost.gradient_evals += m as u64;
            let mut approx = if moved {
                cached.add(&quasi_hessian_product(&buffers, &delta, cfg.history_size)?)
            } else {
                cached.clone()
            }
            .scale(nf);
            for &i in &removed {
                approx.axpy(-1.0, &sample_gradient(&theta, data, i, spec));
            }
            approx.scale(1.0 / keep)
        };
        theta = gd_step(&theta, eta, &g);
        if !theta.is_finite() {
            return Err(UnlearnError::NumericalDivergence { step: t, loss: f64::NAN });
        }
    }
    if m == 0 {
        // the replay above reproduces θ_T; report the exact-step schedule anyway
        report.exact_steps = cfg.exact_step_count(steps);
    }
    if cfg.post_noise > 0.0 {
        let mut r = rng.derive(tags::DELTAGRAD_NOISE).rng();
        let mut z = normal_vec(&mut r, data.p());
        z.push(0.0);
        theta.axpy(cfg.post_noise, &ParamVector::new(z));
    }
    report.cost.wall_seconds = started.elapsed().as_secs_f64();
    Ok((theta, report))
}
