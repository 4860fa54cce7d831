//! Gradient-descent training with full history caching.
//!
//! Every run records `θ_0..θ_T` together with the full-batch gradient of the
//! training objective at each of those points, which is what the
//! history-driven unlearning methods replay. Gradients taken only to fill the
//! history are not charged to the gradient-evaluation count.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::loss::{finish_gradient, gradient_sum, loss_and_gradient, LossKind, LossSpec};
use crate::params::ParamVector;
use crate::rng::{normal_vec, tags, RngStream};

/// Loss level treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant { eta: f64 },
    /// `η_t = η / (t + 1)` for the zero-based step index `t`.
    InverseTime { eta: f64 },
}

impl Schedule {
    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            Schedule::Constant { eta } => eta,
            Schedule::InverseTime { eta } => eta / (t as f64 + 1.0),
        }
    }

    pub fn base(&self) -> f64 {
        match *self {
            Schedule::Constant { eta } | Schedule::InverseTime { eta } => eta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchMode {
    Full,
    /// Each of the `steps` epochs shuffles the rows and takes one step per
    /// consecutive chunk of `size` rows.
    Minibatch { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Zeros,
    Gaussian { scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Full-batch steps, or epochs in minibatch mode.
    pub steps: usize,
    pub schedule: Schedule,
    pub batch: BatchMode,
    pub init: Init,
}

impl TrainConfig {
    pub fn full_batch(steps: usize, eta: f64) -> Self {
        Self {
            steps,
            schedule: Schedule::Constant { eta },
            batch: BatchMode::Full,
            init: Init::Zeros,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eta = self.schedule.base();
        if !eta.is_finite() || eta <= 0.0 {
            return Err(UnlearnError::InvalidConfig(format!("learning rate must be positive, got {eta}")));
        }
        if let BatchMode::Minibatch { size: 0 } = self.batch {
            return Err(UnlearnError::InvalidConfig("minibatch size must be at least 1".into()));
        }
        if let Init::Gaussian { scale } = self.init {
            if !scale.is_finite() || scale < 0.0 {
                return Err(UnlearnError::InvalidConfig(format!("init scale must be nonnegative, got {scale}")));
            }
        }
        Ok(())
    }

    /// Per-sample gradient evaluations charged for training on `n` rows:
    /// every step or epoch touches each row once, so the count is `T·n`.
    pub fn gradient_evals(&self, n: usize) -> u64 {
        self.steps as u64 * n as u64
    }
}

/// Deterministic work and wall-clock time spent by a training or unlearning
/// call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub gradient_evals: u64,
    pub wall_seconds: f64,
}

impl Cost {
    pub fn add(&mut self, other: Cost) {
        self.gradient_evals += other.gradient_evals;
        self.wall_seconds += other.wall_seconds;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// `θ_0..θ_T`.
    pub params: Vec<ParamVector>,
    /// Full-batch objective gradients at each recorded `θ_t`.
    pub grads: Vec<ParamVector>,
    pub config: TrainConfig,
    pub spec: LossSpec,
    pub rng: RngStream,
    /// Scale of the linear noise term in the objective; zero for plain runs.
    pub noise_sigma: f64,
}

pub fn initial_params(dim: usize, init: Init, rng: RngStream) -> ParamVector {
    match init {
        Init::Zeros => ParamVector::zeros(dim),
        Init::Gaussian { scale } => {
            let mut r = rng.derive(tags::INIT).rng();
            ParamVector::new(normal_vec(&mut r, dim).into_iter().map(|v| v * scale).collect())
        }
    }
}

/// One gradient step `θ − η·g`, coordinate by coordinate.
pub fn gd_step(theta: &ParamVector, eta: f64, grad: &ParamVector) -> ParamVector {
    ParamVector::new(theta.iter().zip(grad.iter()).map(|(t, g)| t - eta * g).collect())
}

/// The linear noise coefficient `σ·b/n` with `b ~ N(0, 1)` on the weights and
/// a zero intercept coordinate.
pub fn objective_noise(p: usize, sigma: f64, rng: RngStream) -> ParamVector {
    let mut r = rng.derive(tags::OBJECTIVE_NOISE).rng();
    let mut b = normal_vec(&mut r, p);
    b.push(0.0);
    ParamVector::new(b.into_iter().map(|v| v * sigma).collect())
}

fn check_divergence(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(UnlearnError::NumericalDivergence { step, loss });
    }
    Ok(())
}

struct Objective<'a> {
    data: &'a DatasetTable,
    spec: &'a LossSpec,
    /// Gradient of the linear term, already divided by n.
    linear: Option<ParamVector>,
}

impl Objective<'_> {
    fn full(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        let (mut loss, mut g) = loss_and_gradient(theta, self.data, self.spec)?;
        if let Some(c) = &self.linear {
            loss += c.dot(theta);
            for j in 0..g.len() {
                g[j] += c[j];
            }
        }
        Ok((loss, g))
    }

    fn batch(&self, theta: &ParamVector, positions: &[usize]) -> ParamVector {
        let sum = gradient_sum(theta, self.data, positions, self.spec);
        let mut g = finish_gradient(&sum, positions.len(), theta, self.spec);
        if let Some(c) = &self.linear {
            for j in 0..g.len() {
                g[j] += c[j];
            }
        }
        g
    }
}

fn run(
    obj: &Objective<'_>,
    cfg: &TrainConfig,
    rng: RngStream,
    start: ParamVector,
    noise_sigma: f64,
) -> Result<(ParamVector, TrainHistory)> {
    cfg.validate()?;
    obj.spec.validate()?;
    if obj.data.is_empty() {
        return Err(UnlearnError::degenerate("training on an empty dataset"));
    }
    if start.len() != obj.data.p() + 1 {
        return Err(UnlearnError::shape(obj.data.p() + 1, start.len()));
    }
    let mut params = Vec::with_capacity(cfg.steps + 1);
    let mut grads = Vec::with_capacity(cfg.steps + 1);
    let mut theta = start;
    match cfg.batch {
        BatchMode::Full => {
            for t in 0..=cfg.steps {
                let (loss, g) = obj.full(&theta)?;
                check_divergence(t, loss)?;
                params.push(theta.clone());
                if t < cfg.steps {
                    theta = gd_step(&theta, cfg.schedule.eta(t), &g);
                }
                grads.push(g);
            }
        }
        BatchMode::Minibatch { size } => {
            let shuffles = rng.derive(tags::MINIBATCH);
            let mut order: Vec<usize> = (0..obj.data.n()).collect();
            let mut step = 0;
            for epoch in 0..=cfg.steps {
                let (loss, g) = obj.full(&theta)?;
                check_divergence(epoch, loss)?;
                params.push(theta.clone());
                grads.push(g);
                if epoch == cfg.steps {
                    break;
                }
                order.sort_unstable();
                order.shuffle(&mut shuffles.derive(epoch as u64).rng());
                for chunk in order.chunks(size) {
                    let g = obj.batch(&theta, chunk);
                    theta = gd_step(&theta, cfg.schedule.eta(step), &g);
                    step += 1;
                }
            }
        }
    }
    if !theta.is_finite() {
        return Err(UnlearnError::NumericalDivergence { step: cfg.steps, loss: f64::NAN });
    }
    let history = TrainHistory {
        params,
        grads,
        config: *cfg,
        spec: *obj.spec,
        rng,
        noise_sigma,
    };
    Ok((theta, history))
}

/// Trains from the configured initialization.
pub fn train_gd(
    data: &DatasetTable,
    spec: &LossSpec,
    cfg: &TrainConfig,
    rng: RngStream,
) -> Result<(ParamVector, TrainHistory)> {
    let start = initial_params(data.p() + 1, cfg.init, rng);
    train_from(data, spec, cfg, rng, start)
}

/// Trains from an explicit starting point; `cfg.init` is ignored.
pub fn train_from(
    data: &DatasetTable,
    spec: &LossSpec,
    cfg: &TrainConfig,
    rng: RngStream,
    start: ParamVector,
) -> Result<(ParamVector, TrainHistory)> {
    let obj = Objective { data, spec, linear: None };
    run(&obj, cfg, rng, start, 0.0)
}

/// Trains on `L(θ, D) + σ·bᵀθ/n`. Returns the drawn `σ·b` alongside the
/// usual outputs; with `σ = 0` the run is identical to [`train_gd`].
pub fn train_noisy(
    data: &DatasetTable,
    spec: &LossSpec,
    sigma: f64,
    cfg: &TrainConfig,
    rng: RngStream,
) -> Result<(ParamVector, TrainHistory, ParamVector)> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(UnlearnError::InvalidConfig(format!("sigma must be nonnegative, got {sigma}")));
    }
    let noise = objective_noise(data.p(), sigma, rng);
    let linear = if sigma > 0.0 {
        if data.is_empty() {
            return Err(UnlearnError::degenerate("training on an empty dataset"));
        }
        Some(noise.scale(1.0 / data.n() as f64))
    } else {
        None
    };
    let start = initial_params(data.p() + 1, cfg.init, rng);
    let obj = Objective { data, spec, linear };
    let (theta, history) = run(&obj, cfg, rng, start, sigma)?;
    Ok((theta, history, noise))
}

/// Retrains from scratch on the rows that survive removing `ids`.
pub fn naive_retrain(
    data: &DatasetTable,
    ids: &[SampleId],
    spec: &LossSpec,
    cfg: &TrainConfig,
    rng: RngStream,
) -> Result<(ParamVector, TrainHistory, Cost)> {
    let survivors = data.remove_rows(ids)?;
    if survivors.is_empty() {
        return Err(UnlearnError::degenerate("every sample was removed"));
    }
    let start = Instant::now();
    let (theta, history) = train_gd(&survivors, spec, cfg, rng)?;
    let cost = Cost {
        gradient_evals: cfg.gradient_evals(survivors.n()),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((theta, history, cost))
}

const HISTORY_MAGIC: &[u8; 4] = b"UKH1";

impl TrainHistory {
    pub fn steps(&self) -> usize {
        self.params.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.params.first().map_or(0, |p| p.len())
    }

    pub fn initial(&self) -> &ParamVector {
        &self.params[0]
    }

    pub fn final_params(&self) -> &ParamVector {
        self.params.last().expect("history holds at least θ_0")
    }

    /// Reconstructs `θ_T`. Full-batch runs apply the stored gradients with the
    /// schedule and need no data; minibatch runs regenerate their batches from
    /// the stored stream over `data`.
    pub fn replay(&self, data: &DatasetTable) -> Result<ParamVector> {
        match self.config.batch {
            BatchMode::Full => {
                let mut theta = self.initial().clone();
                for t in 0..self.steps() {
                    theta = gd_step(&theta, self.config.schedule.eta(t), &self.grads[t]);
                }
                Ok(theta)
            }
            BatchMode::Minibatch { .. } => {
                let linear = (self.noise_sigma > 0.0).then(|| {
                    objective_noise(data.p(), self.noise_sigma, self.rng).scale(1.0 / data.n() as f64)
                });
                let obj = Objective { data, spec: &self.spec, linear };
                let (theta, _) = run(&obj, &self.config, self.rng, self.initial().clone(), self.noise_sigma)?;
                Ok(theta)
            }
        }
    }

    /// Binary encoding: magic `UKH1`, then little-endian u64/f64 header fields
    /// and the raw parameter and gradient records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_magic(HISTORY_MAGIC);
        e.usize(self.params.len());
        e.usize(self.dim());
        e.u64(self.rng.seed);
        e.u64(self.rng.stream_id);
        e.usize(self.config.steps);
        match self.config.schedule {
            Schedule::Constant { eta } => {
                e.u64(0);
                e.f64(eta);
            }
            Schedule::InverseTime { eta } => {
                e.u64(1);
                e.f64(eta);
            }
        }
        e.usize(match self.config.batch {
            BatchMode::Full => 0,
            BatchMode::Minibatch { size } => size,
        });
        match self.config.init {
            Init::Zeros => {
                e.u64(0);
                e.f64(0.0);
            }
            Init::Gaussian { scale } => {
                e.u64(1);
                e.f64(scale);
            }
        }
        e.u64(match self.spec.kind {
            LossKind::Logistic => 0,
            LossKind::Squared => 1,
        });
        e.f64(self.spec.l2_lambda);
        e.f64(self.noise_sigma);
        for p in &self.params {
            e.f64s(p);
        }
        for g in &self.grads {
            e.f64s(g);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, HISTORY_MAGIC)?;
        let records = d.len(16)?;
        let dim = d.len(8)?;
        let rng = RngStream::new(d.u64()?, d.u64()?);
        let steps = d.usize()?;
        let schedule = match (d.u64()?, d.f64()?) {
            (0, eta) => Schedule::Constant { eta },
            (1, eta) => Schedule::InverseTime { eta },
            (k, _) => return Err(UnlearnError::Format(format!("unknown schedule kind {k}"))),
        };
        let batch = match d.usize()? {
            0 => BatchMode::Full,
            size => BatchMode::Minibatch { size },
        };
        let init = match (d.u64()?, d.f64()?) {
            (0, _) => Init::Zeros,
            (1, scale) => Init::Gaussian { scale },
            (k, _) => return Err(UnlearnError::Format(format!("unknown init kind {k}"))),
        };
        let kind = match d.u64()? {
            0 => LossKind::Logistic,
            1 => LossKind::Squared,
            k => return Err(UnlearnError::Format(format!("unknown loss kind {k}"))),
        };
        let spec = LossSpec { kind, l2_lambda: d.f64()? };
        let noise_sigma = d.f64()?;
        if records != steps + 1 {
            return Err(UnlearnError::Format(format!(
                "{records} records for {steps} steps"
            )));
        }
        let params = (0..records).map(|_| d.f64s(dim).map(ParamVector::new)).collect::<Result<_>>()?;
        let grads = (0..records).map(|_| d.f64s(dim).map(ParamVector::new)).collect::<Result<_>>()?;
        d.finish()?;
        Ok(Self {
            params,
            grads,
            config: TrainConfig { steps, schedule, batch, init },
            spec,
            rng,
            noise_sigma,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ridge_closed_form;
    use crate::loss::loss_value;
    use crate::testutil::random_table;

    fn squared_fixture() -> (DatasetTable, LossSpec) {
        (random_table(100, 5, 21), LossSpec::squared(0.1))
    }

    #[test]
    fn full_batch_reaches_ridge_solution() {
        let (t, spec) = squared_fixture();
        let cfg = TrainConfig::full_batch(5000, 0.5);
        let (theta, hist) = train_gd(&t, &spec, &cfg, RngStream::from_seed(0)).unwrap();
        let oracle = ridge_closed_form(&t, 0.1, None).unwrap();
        assert!(theta.sub(&oracle).norm2() < 1e-6);
        assert_eq!(hist.params.len(), 5001);
        assert_eq!(hist.grads.len(), 5001);
        assert_eq!(hist.final_params(), &theta);
    }

    #[test]
    fn zero_steps_returns_init() {
        let (t, spec) = squared_fixture();
        let mut cfg = TrainConfig::full_batch(0, 0.1);
        cfg.init = Init::Gaussian { scale: 0.3 };
        let rng = RngStream::from_seed(4);
        let (theta, hist) = train_gd(&t, &spec, &cfg, rng).unwrap();
        assert_eq!(theta, initial_params(6, cfg.init, rng));
        assert_eq!(hist.params.len(), 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let t = random_table(80, 3, 2);
        let spec = LossSpec::logistic(0.01);
        let mut cfg = TrainConfig::full_batch(30, 0.5);
        cfg.batch = BatchMode::Minibatch { size: 16 };
        cfg.init = Init::Gaussian { scale: 0.1 };
        let a = train_gd(&t, &spec, &cfg, RngStream::new(3, 1)).unwrap();
        let b = train_gd(&t, &spec, &cfg, RngStream::new(3, 1)).unwrap();
        assert_eq!(a, b);
        let c = train_gd(&t, &spec, &cfg, RngStream::new(3, 2)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn noisy_with_zero_sigma_is_plain_training() {
        let t = random_table(60, 4, 8);
        let spec = LossSpec::logistic(0.05);
        let cfg = TrainConfig::full_batch(50, 1.0);
        let rng = RngStream::from_seed(12);
        let (a, ha) = train_gd(&t, &spec, &cfg, rng).unwrap();
        let (b, hb, noise) = train_noisy(&t, &spec, 0.0, &cfg, rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(noise, ParamVector::zeros(5));
    }

    #[test]
    fn noisy_squared_matches_perturbed_normal_equations() {
        let (t, spec) = squared_fixture();
        let cfg = TrainConfig::full_batch(5000, 0.5);
        let sigma = 2.0;
        let (theta, _, noise) = train_noisy(&t, &spec, sigma, &cfg, RngStream::from_seed(5)).unwrap();
        assert_eq!(noise.len(), 6);
        assert_eq!(noise[5], 0.0);
        let shift = noise.scale(1.0 / t.n() as f64);
        let oracle = ridge_closed_form(&t, 0.1, Some(&shift)).unwrap();
        assert!(theta.sub(&oracle).norm2() < 1e-6);
        let plain = ridge_closed_form(&t, 0.1, None).unwrap();
        assert!(theta.sub(&plain).norm2() > 1e-3);
    }

    #[test]
    fn naive_retrain_cases() {
        let t = random_table(200, 3, 30);
        let spec = LossSpec::logistic(0.01);
        let cfg = TrainConfig::full_batch(40, 1.0);
        let rng = RngStream::from_seed(2);
        let (full, _) = train_gd(&t, &spec, &cfg, rng).unwrap();
        let (same, _, cost) = naive_retrain(&t, &[], &spec, &cfg, rng).unwrap();
        assert_eq!(full, same);
        assert_eq!(cost.gradient_evals, 40 * 200);

        let half: Vec<SampleId> = t.ids()[..100].to_vec();
        let (r, _, cost) = naive_retrain(&t, &half, &spec, &cfg, rng).unwrap();
        let survivors = t.select_ids(&t.ids()[100..]).unwrap();
        let (direct, _) = train_gd(&survivors, &spec, &cfg, rng).unwrap();
        assert_eq!(r, direct);
        assert_eq!(cost.gradient_evals, 40 * 100);

        assert!(matches!(
            naive_retrain(&t, t.ids(), &spec, &cfg, rng),
            Err(UnlearnError::DegenerateInput(_))
        ));
    }

    #[test]
    fn minibatch_count_matches_per_batch_model() {
        // ceil(n/B) batches per epoch, each charged its own row count
        let cfg = TrainConfig { batch: BatchMode::Minibatch { size: 32 }, ..TrainConfig::full_batch(7, 0.1) };
        let n = 100usize;
        let batches = n.div_ceil(32);
        let per_epoch: usize = (0..batches).map(|b| (n - b * 32).min(32)).sum();
        assert_eq!(cfg.gradient_evals(n), (7 * per_epoch) as u64);
    }

    #[test]
    fn replay_reconstructs_final_params() {
        let t = random_table(70, 3, 40);
        let spec = LossSpec::logistic(0.02);
        let cfg = TrainConfig {
            schedule: Schedule::InverseTime { eta: 2.0 },
            ..TrainConfig::full_batch(25, 1.0)
        };
        let (theta, hist) = train_gd(&t, &spec, &cfg, RngStream::from_seed(1)).unwrap();
        assert_eq!(hist.replay(&t).unwrap(), theta);

        let mb = TrainConfig { batch: BatchMode::Minibatch { size: 10 }, ..cfg };
        let (theta, hist, _) = train_noisy(&t, &spec, 0.5, &mb, RngStream::from_seed(1)).unwrap();
        assert_eq!(hist.replay(&t).unwrap(), theta);
    }

    #[test]
    fn loss_is_monotone_for_small_steps() {
        let t = random_table(120, 4, 17);
        let spec = LossSpec::logistic(0.1);
        let cfg = TrainConfig::full_batch(60, 1.0);
        let (_, hist) = train_gd(&t, &spec, &cfg, RngStream::from_seed(0)).unwrap();
        let losses: Vec<f64> = hist.params.iter().map(|p| loss_value(p, &t, &spec).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn divergence_is_reported() {
        let t = random_table(50, 3, 3).map_rows(|_, row, _| row.iter_mut().for_each(|v| *v *= 100.0));
        let spec = LossSpec::squared(0.0);
        let cfg = TrainConfig::full_batch(200, 10.0);
        assert!(matches!(
            train_gd(&t, &spec, &cfg, RngStream::from_seed(0)),
            Err(UnlearnError::NumericalDivergence { .. })
        ));
    }

    #[test]
    fn empty_data_and_bad_config() {
        let t = DatasetTable::empty(2, 2);
        let spec = LossSpec::logistic(0.1);
        assert!(matches!(
            train_gd(&t, &spec, &TrainConfig::full_batch(1, 0.1), RngStream::from_seed(0)),
            Err(UnlearnError::DegenerateInput(_))
        ));
        let t = random_table(5, 2, 0);
        assert!(train_gd(&t, &spec, &TrainConfig::full_batch(1, 0.0), RngStream::from_seed(0)).is_err());
    }

    #[test]
    fn history_file_round_trip() {
        let t = random_table(30, 2, 9);
        let cfg = TrainConfig {
            batch: BatchMode::Minibatch { size: 8 },
            init: Init::Gaussian { scale: 0.2 },
            ..TrainConfig::full_batch(4, 0.3)
        };
        let (_, hist, _) = train_noisy(&t, &LossSpec::squared(0.4), 0.7, &cfg, RngStream::new(5, 6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ukh");
        hist.write(&path).unwrap();
        assert_eq!(TrainHistory::read(&path).unwrap(), hist);
        let bytes = hist.to_bytes();
        assert_eq!(&bytes[..4], b"UKH1");
        assert!(TrainHistory::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TrainHistory::from_bytes(&bad), Err(UnlearnError::Format(_))));
    }
}
