//! Descent-to-Delete: projected gradient descent restarted after each
//! deletion, with Gaussian perturbation of the published parameters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::loss::{loss_gradient, loss_value, LossSpec};
use crate::params::ParamVector;
use crate::rng::{normal_vec, tags, RngStream};
use crate::trainer::{gd_step, Cost, Schedule};

/// Euclidean projection onto the ball of the given radius around the origin.
pub fn project_ball(theta: &ParamVector, radius: f64) -> ParamVector {
    let norm = theta.norm2();
    if norm <= radius {
        theta.clone()
    } else {
        theta.scale(radius / norm)
    }
}

/// Which parameters the next request starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainMode {
    /// Start from the published (perturbed) parameters.
    Perfect,
    /// Start from the secret, unperturbed parameters.
    Imperfect,
}

/// Records which parameters a request actually read as its start point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartSource {
    Published,
    Secret,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2DConfig {
    pub mode: ChainMode,
    /// Iterations per request (`T_i`).
    pub budget: usize,
    pub sigma: f64,
    pub schedule: Schedule,
    /// Radius of the parameter ball; defaults to ten times the initial norm.
    pub radius: Option<f64>,
}

impl D2DConfig {
    pub fn new(mode: ChainMode, budget: usize, sigma: f64, eta: f64) -> Self {
        Self { mode, budget, sigma, schedule: Schedule::Constant { eta }, radius: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct D2DState {
    /// `θ̃_i`, the only parameters that leave the mechanism.
    pub published: ParamVector,
    /// `θ̂_i`.
    pub secret: ParamVector,
    /// `D_i`.
    pub data: DatasetTable,
    pub mode: ChainMode,
    pub radius: f64,
    pub budget: usize,
    pub sigma: f64,
    /// Number of requests served so far.
    pub request: usize,
    pub last_start: Option<StartSource>,
    pub cost: Cost,
}

impl D2DState {
    /// Wraps a trained model as request zero.
    pub fn new(theta: ParamVector, data: DatasetTable, cfg: &D2DConfig) -> Result<Self> {
        if !cfg.sigma.is_finite() || cfg.sigma < 0.0 {
            return Err(UnlearnError::InvalidConfig(format!("sigma must be nonnegative, got {}", cfg.sigma)));
        }
        let radius = match cfg.radius {
            Some(r) if r > 0.0 && r.is_finite() => r,
            Some(r) => return Err(UnlearnError::InvalidConfig(format!("radius must be positive, got {r}"))),
            None if theta.norm2() > 0.0 => 10.0 * theta.norm2(),
            None => 1.0,
        };
        if theta.len() != data.p() + 1 {
            return Err(UnlearnError::shape(data.p() + 1, theta.len()));
        }
        Ok(Self {
            published: theta.clone(),
            secret: theta,
            data,
            mode: cfg.mode,
            radius,
            budget: cfg.budget,
            sigma: cfg.sigma,
            request: 0,
            last_start: None,
            cost: Cost::default(),
        })
    }

    fn start(&self) -> (ParamVector, StartSource) {
        match self.mode {
            ChainMode::Perfect => (self.published.clone(), StartSource::Published),
            ChainMode::Imperfect => (self.secret.clone(), StartSource::Secret),
        }
    }
}

/// Serves one deletion request.
pub fn pgd_unlearn(
    state: &D2DState,
    z: SampleId,
    spec: &LossSpec,
    schedule: &Schedule,
    rng: RngStream,
) -> Result<D2DState> {
    if !state.data.contains(z) {
        return Err(UnlearnError::MissingSample(z));
    }
    let started = Instant::now();
    let data = state.data.remove_rows(&[z])?;
    if data.is_empty() {
        return Err(UnlearnError::degenerate("every sample was removed"));
    }
    let (mut theta, source) = state.start();
    for t in 0..state.budget {
        let g = loss_gradient(&theta, &data, spec)?;
        theta = project_ball(&gd_step(&theta, schedule.eta(t), &g), state.radius);
    }
    if !theta.is_finite() {
        return Err(UnlearnError::NumericalDivergence { step: state.budget, loss: f64::NAN });
    }
    let request = state.request + 1;
    let mut published = theta.clone();
    if state.sigma > 0.0 {
        let mut r = rng.derive_path(&[tags::D2D_REQUEST, request as u64]).rng();
        let mut noise = normal_vec(&mut r, data.p());
        noise.push(0.0);
        published.axpy(state.sigma, &ParamVector::new(noise));
    }
    let cost = Cost {
        gradient_evals: state.budget as u64 * data.n() as u64,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(D2DState {
        published,
        secret: theta,
        data,
        request,
        last_start: Some(source),
        cost,
        ..state.clone()
    })
}

/// One line of a sequence log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2DLogEntry {
    pub request: usize,
    pub seconds: f64,
    pub gradient_evals: u64,
    /// `L(θ̃_i, D_i) − L(θ*_i, D_i)` when an oracle is supplied.
    pub loss_gap: Option<f64>,
    pub published_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct D2DLog {
    pub states: Vec<D2DState>,
    pub entries: Vec<D2DLogEntry>,
}

impl D2DLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("request,seconds,gradient_evals,loss_gap,published_norm\n");
        for e in &self.entries {
            let gap = e.loss_gap.map(|g| g.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.request, e.seconds, e.gradient_evals, gap, e.published_norm));
        }
        out
    }

    pub fn loss_gaps(&self) -> Vec<f64> {
        self.entries.iter().filter_map(|e| e.loss_gap).collect()
    }
}

/// Computes the exact survivor optimum, used to log loss gaps.
pub type RetrainOracle<'a> = &'a mut dyn FnMut(&DatasetTable) -> Result<ParamVector>;

/// Chains [`pgd_unlearn`] over `ids` in order. `oracle`, when given, maps each
/// survivor set to the naive-retrain parameters used for the loss gap.
pub fn run_sequence(
    initial: ParamVector,
    data: &DatasetTable,
    ids: &[SampleId],
    spec: &LossSpec,
    cfg: &D2DConfig,
    rng: RngStream,
    mut oracle: Option<RetrainOracle<'_>>,
) -> Result<D2DLog> {
    let mut state = D2DState::new(initial, data.clone(), cfg)?;
    let mut log = D2DLog { states: Vec::with_capacity(ids.len()), entries: Vec::with_capacity(ids.len()) };
    for &z in ids {
        state = pgd_unlearn(&state, z, spec, &cfg.schedule, rng)?;
        let loss_gap = match oracle.as_mut() {
            Some(f) => {
                let star = f(&state.data)?;
                Some(loss_value(&state.published, &state.data, spec)? - loss_value(&star, &state.data, spec)?)
            }
            None => None,
        };
        log.entries.push(D2DLogEntry {
            request: state.request,
            seconds: state.cost.wall_seconds,
            gradient_evals: state.cost.gradient_evals,
            loss_gap,
            published_norm: state.published.norm2(),
        });
        log.states.push(state.clone());
    }
    Ok(log)
}
