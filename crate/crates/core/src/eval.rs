//! Efficiency, effectiveness, consistency and certifiability measures, the
//! backdoor verification experiment and the retraining monitor.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::mechanism::Method;
use crate::model::Classifier;
use crate::params::ParamVector;
use crate::rng::{tags, RngStream};
use crate::synthetic::train_test_split;
use rand::seq::SliceRandom;

/// Ratio of naive to unlearning time (or work).
pub fn speedup(time_naive: f64, time_unlearn: f64) -> Result<f64> {
    if !time_naive.is_finite() || !time_unlearn.is_finite() || time_naive <= 0.0 || time_unlearn <= 0.0 {
        return Err(UnlearnError::InvalidMeasurement(format!(
            "speed-up needs positive times, got {time_naive} and {time_unlearn}"
        )));
    }
    Ok(time_naive / time_unlearn)
}

pub fn acc_err(metric_unlearned: f64, metric_naive: f64) -> f64 {
    (metric_unlearned - metric_naive).abs()
}

pub fn param_diff(theta_u: &ParamVector, theta_star: &ParamVector) -> Result<f64> {
    Ok(theta_u.try_sub(theta_star)?.norm2())
}

/// Percentage of positions where the two prediction lists agree.
pub fn disagree_consistency(preds_u: &[u32], preds_star: &[u32]) -> Result<f64> {
    if preds_u.is_empty() {
        return Err(UnlearnError::degenerate("no predictions to compare"));
    }
    if preds_u.len() != preds_star.len() {
        return Err(UnlearnError::shape(preds_star.len(), preds_u.len()));
    }
    let agree = preds_u.iter().zip(preds_star).filter(|(a, b)| a == b).count();
    Ok(100.0 * agree as f64 / preds_u.len() as f64)
}

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&x| !x.is_finite() || x < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(UnlearnError::InvalidMeasurement(format!("not a probability vector: {v:?}")));
    }
    Ok(())
}

/// `Σ p_i ln(p_i/q_i)` in nats, with `0·ln 0 = 0`. Returns `+∞` when `q`
/// misses mass that `p` has.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(UnlearnError::shape(p.len(), q.len()));
    }
    check_simplex(p)?;
    check_simplex(q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(0.0))
}

/// Mean KL between the two models' class-probability outputs over `data`.
pub fn output_kl(unlearned: &dyn Classifier, naive: &dyn Classifier, data: &DatasetTable) -> Result<f64> {
    if data.is_empty() {
        return Err(UnlearnError::degenerate("no rows to compare"));
    }
    let mut total = 0.0;
    for i in 0..data.n() {
        let x = data.row(i);
        total += kl_divergence(&unlearned.class_probabilities(x), &naive.class_probabilities(x))?;
    }
    Ok(total / data.n() as f64)
}

/// Symmetric absolute percentage error in percent; zero when both inputs are.
pub fn sape(a: f64, b: f64) -> f64 {
    let denom = a.abs() + b.abs();
    if denom == 0.0 {
        0.0
    } else {
        100.0 * (a - b).abs() / denom
    }
}

/// SAPE between the two models' metric on the removed rows.
pub fn acc_dis(metric_unlearned_on_du: f64, metric_naive_on_du: f64) -> f64 {
    sape(metric_unlearned_on_du, metric_naive_on_du)
}

/// Fraction of loss gaps strictly above `alpha`.
pub fn alpha_beta_estimate(gaps: &[f64], alpha: f64) -> Result<f64> {
    if gaps.is_empty() {
        return Err(UnlearnError::degenerate("no loss-gap samples"));
    }
    Ok(gaps.iter().filter(|&&g| g > alpha).count() as f64 / gaps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingClass {
    /// Per-request cost grows at most logarithmically.
    Strong,
    Weak,
}

/// Strong when every `C_i ≤ C_1·(1 + ln i)`.
pub fn classify_timing(costs: &[f64]) -> Result<TimingClass> {
    let first = *costs.first().ok_or_else(|| UnlearnError::degenerate("no request costs"))?;
    let strong = costs.iter().enumerate().all(|(i, &c)| c <= first * (1.0 + ((i + 1) as f64).ln()));
    Ok(if strong { TimingClass::Strong } else { TimingClass::Weak })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Fraction of correct labels.
    Accuracy,
    /// Mean probability assigned to the true class.
    MeanTrueClassProbability,
    /// Coefficient of determination of the real-valued output.
    R2,
}

/// Per-row outputs of a model, enough to recompute every metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub ids: Vec<SampleId>,
    pub labels: Vec<u32>,
    pub predicted: Vec<u32>,
    pub scores: Vec<f64>,
    pub probabilities: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn from_model(model: &dyn Classifier, data: &DatasetTable) -> Self {
        let rows = 0..data.n();
        Self {
            ids: data.ids().to_vec(),
            labels: data.labels().to_vec(),
            predicted: rows.clone().map(|i| model.predict_label(data.row(i))).collect(),
            scores: rows.clone().map(|i| model.predict_score(data.row(i))).collect(),
            probabilities: rows.map(|i| model.class_probabilities(data.row(i))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn metric(&self, metric: Metric) -> Result<f64> {
        if self.is_empty() {
            return Err(UnlearnError::degenerate("metric over no rows"));
        }
        let n = self.len() as f64;
        Ok(match metric {
            Metric::Accuracy => self.labels.iter().zip(&self.predicted).filter(|(a, b)| a == b).count() as f64 / n,
            Metric::MeanTrueClassProbability => {
                self.labels.iter().zip(&self.probabilities).map(|(&y, p)| p[y as usize]).sum::<f64>() / n
            }
            Metric::R2 => {
                let mean = self.labels.iter().map(|&y| y as f64).sum::<f64>() / n;
                let ss_tot: f64 = self.labels.iter().map(|&y| (y as f64 - mean).powi(2)).sum();
                let ss_res: f64 = self.labels.iter().zip(&self.scores).map(|(&y, s)| (y as f64 - s).powi(2)).sum();
                if ss_tot == 0.0 {
                    if ss_res == 0.0 { 1.0 } else { 0.0 }
                } else {
                    1.0 - ss_res / ss_tot
                }
            }
        })
    }
}

pub fn evaluate_metric(model: &dyn Classifier, data: &DatasetTable, metric: Metric) -> Result<f64> {
    Predictions::from_model(model, data).metric(metric)
}

/// Measures comparing an unlearned model with its naive retrain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric_unlearned_test: f64,
    pub metric_naive_test: f64,
    pub metric_unlearned_removed: f64,
    pub metric_naive_removed: f64,
    pub acc_err: f64,
    pub disagree_pct: f64,
    /// `None` when some output puts zero mass where the other does not.
    pub kl: Option<f64>,
    pub acc_dis: f64,
}

pub fn compare_models(
    unlearned: &dyn Classifier,
    naive: &dyn Classifier,
    test: &DatasetTable,
    removed: &DatasetTable,
    metric: Metric,
) -> Result<Comparison> {
    let (pu, pn) = (Predictions::from_model(unlearned, test), Predictions::from_model(naive, test));
    compare_predictions(&pu, &pn, &Predictions::from_model(unlearned, removed), &Predictions::from_model(naive, removed), metric)
}

/// [`compare_models`] from stored predictions.
pub fn compare_predictions(
    test_u: &Predictions,
    test_star: &Predictions,
    removed_u: &Predictions,
    removed_star: &Predictions,
    metric: Metric,
) -> Result<Comparison> {
    let (mu, ms) = (test_u.metric(metric)?, test_star.metric(metric)?);
    let (ru, rs) = if removed_u.is_empty() { (0.0, 0.0) } else { (removed_u.metric(metric)?, removed_star.metric(metric)?) };
    let mut kl = 0.0;
    for (p, q) in test_u.probabilities.iter().zip(&test_star.probabilities) {
        kl += kl_divergence(p, q)?;
    }
    kl /= test_u.len() as f64;
    Ok(Comparison {
        metric_unlearned_test: mu,
        metric_naive_test: ms,
        metric_unlearned_removed: ru,
        metric_naive_removed: rs,
        acc_err: acc_err(mu, ms),
        disagree_pct: disagree_consistency(&test_u.predicted, &test_star.predicted)?,
        kl: kl.is_finite().then_some(kl),
        acc_dis: acc_dis(ru, rs),
    })
}

/// One benchmark cell's measurements. Flat so that it maps onto one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub deletion: String,
    pub seed: u64,
    pub deleted: usize,
    pub metric: Metric,
    pub exact: bool,
    /// Wall-clock ratio; omitted in deterministic mode.
    pub speedup: Option<f64>,
    /// Ratio of deterministic work units.
    pub work_speedup: f64,
    pub acc_err: f64,
    pub param_diff: Option<f64>,
    pub disagree_pct: f64,
    pub kl: Option<f64>,
    pub acc_dis: f64,
    pub metric_unlearned_test: f64,
    pub metric_naive_test: f64,
    pub metric_unlearned_removed: f64,
    pub metric_naive_removed: f64,
    pub unlearn_seconds: Option<f64>,
    pub naive_seconds: Option<f64>,
    pub unlearn_work: u64,
    pub naive_work: u64,
    pub sigma: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub notes: String,
    pub created_unix: Option<u64>,
}

impl EvalReport {
    /// Drops every field that depends on the clock.
    pub fn scrub_timing(&mut self) {
        self.speedup = None;
        self.unlearn_seconds = None;
        self.naive_seconds = None;
        self.created_unix = None;
    }

    /// Checks the report's numeric invariants.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.work_speedup, self.acc_err, self.disagree_pct, self.acc_dis]
            .into_iter()
            .chain(self.speedup)
            .chain(self.param_diff)
            .all(f64::is_finite);
        if !finite || !(0.0..=100.0).contains(&self.acc_dis) || !(0.0..=100.0).contains(&self.disagree_pct) {
            return Err(UnlearnError::InvalidMeasurement(format!("report for {} out of range", self.method)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackdoorSpec {
    pub trigger_indices: Vec<usize>,
    /// Added to the feature at the matching index.
    pub trigger_offsets: Vec<f64>,
    pub target_label: u32,
    /// Size of the removal set `D_u`, drawn from rows outside the target class.
    pub removal_count: usize,
    /// Fraction of `D_u` that carries the trigger and the target label.
    pub poison_fraction: f64,
    /// Share of the data held out to build the trigger set.
    pub test_fraction: f64,
}

impl BackdoorSpec {
    pub fn validate(&self, p: usize, class_count: u32) -> Result<()> {
        let bad = |m: String| Err(UnlearnError::InvalidConfig(m));
        if self.trigger_indices.is_empty() || self.trigger_indices.len() != self.trigger_offsets.len() {
            return bad("trigger indices and offsets must be nonempty and of equal length".into());
        }
        if let Some(j) = self.trigger_indices.iter().find(|&&j| j >= p) {
            return bad(format!("trigger index {j} outside {p} features"));
        }
        if self.target_label >= class_count {
            return bad(format!("target label {} outside {class_count} classes", self.target_label));
        }
        if !(0.0..=1.0).contains(&self.poison_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return bad("poison and test fractions must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn apply(&self, row: &mut [f64]) {
        for (&j, &off) in self.trigger_indices.iter().zip(&self.trigger_offsets) {
            row[j] += off;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackdoorOutcome {
    /// SAPE between the unlearned and naive trigger accuracies.
    pub acc_dis: f64,
    /// Trigger accuracies in percent: share of triggered rows sent to the
    /// target label.
    pub original: f64,
    pub unlearned: f64,
    pub naive: f64,
    /// `100 / class_count`.
    pub chance: f64,
    pub poisoned: usize,
}

/// Poisons a removal set with the trigger, trains, removes it and compares
/// trigger accuracy of the unlearned model with the naive retrain.
pub fn backdoor_experiment(data: &DatasetTable, spec: &BackdoorSpec, method: &Method, rng: RngStream) -> Result<BackdoorOutcome> {
    spec.validate(data.p(), data.class_count())?;
    let stream = rng.derive(tags::BACKDOOR);
    let (train, test) = train_test_split(data, spec.test_fraction, stream.derive(0))?;
    let mut candidates: Vec<usize> = (0..train.n()).filter(|&i| train.label(i) != spec.target_label).collect();
    if candidates.len() < spec.removal_count || spec.removal_count == 0 {
        return Err(UnlearnError::degenerate(format!(
            "{} rows outside the target class cannot supply {} removals",
            candidates.len(),
            spec.removal_count
        )));
    }
    candidates.shuffle(&mut stream.derive(1).rng());
    candidates.truncate(spec.removal_count);
    let poisoned = (spec.poison_fraction * spec.removal_count as f64).round() as usize;
    let mut is_poisoned = vec![false; train.n()];
    for &i in &candidates[..poisoned] {
        is_poisoned[i] = true;
    }
    let removal: Vec<SampleId> = candidates.iter().map(|&i| train.id(i)).collect();
    let poisoned_train = train.map_rows(|i, row, label| {
        if is_poisoned[i] {
            spec.apply(row);
            *label = spec.target_label;
        }
    });
    let keep: Vec<usize> = (0..test.n()).filter(|&i| test.label(i) != spec.target_label).collect();
    let triggers = test.select_positions(&keep).map_rows(|_, row, _| spec.apply(row));
    if triggers.is_empty() {
        return Err(UnlearnError::degenerate("no rows available for the trigger set"));
    }
    let trigger_acc = |m: &dyn Classifier| {
        let hits = (0..triggers.n()).filter(|&i| m.predict_label(triggers.row(i)) == spec.target_label).count();
        100.0 * hits as f64 / triggers.n() as f64
    };
    let (original, _) = method.train(&poisoned_train, rng)?;
    let (unlearned, _) = method.unlearn(&original, &poisoned_train, &removal, rng)?;
    let (naive, _) = method.naive(&original, &poisoned_train, &removal, rng)?;
    let (u, n) = (trigger_acc(&unlearned), trigger_acc(&naive));
    Ok(BackdoorOutcome {
        acc_dis: sape(u, n),
        original: trigger_acc(&original),
        unlearned: u,
        naive: n,
        chance: 100.0 / data.class_count() as f64,
        poisoned,
    })
}

/// Proxy values computed without a naive retrain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proxies {
    pub acc_dis: f64,
    pub acc_err: f64,
    /// Last retrain time over last unlearning time; `None` before either is
    /// known.
    pub speedup: Option<f64>,
}

/// `c·SAPE(M_m, M*_last)`, `e·|M_m − M*_last|` and the time ratio.
pub fn monitor_proxies(
    current: f64,
    baseline: Option<f64>,
    c: f64,
    e: f64,
    last_retrain_seconds: f64,
    last_unlearn_seconds: f64,
) -> Result<Proxies> {
    let base = baseline.ok_or(UnlearnError::NoBaseline)?;
    Ok(Proxies {
        acc_dis: c * sape(current, base),
        acc_err: e * (current - base).abs(),
        speedup: speedup(last_retrain_seconds, last_unlearn_seconds).ok(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub acc_dis: f64,
    pub acc_err: f64,
}

impl Tolerances {
    /// A proxy breaches its tolerance once it reaches it, so zero always
    /// breaches and infinity never does.
    pub fn breached(&self, p: &Proxies) -> bool {
        p.acc_dis >= self.acc_dis || p.acc_err >= self.acc_err
    }
}

/// One step's raw proxies (before scaling) next to the true values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub raw_acc_dis: f64,
    pub raw_acc_err: f64,
    pub true_acc_dis: f64,
    pub true_acc_err: f64,
}

/// Tracks the last full retrain and rescales the proxies so they bound the
/// true values seen in the previous retrain-to-retrain window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    pub tolerances: Tolerances,
    pub c: f64,
    pub e: f64,
    pub baseline: Option<f64>,
    pub last_retrain_seconds: f64,
    pub window: Vec<CalibrationSample>,
}

fn max_ratio(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    // steps whose raw proxy is zero cannot be covered by any finite scale
    pairs.filter(|&(_, raw)| raw > 0.0).map(|(t, raw)| t / raw).fold(1.0, f64::max)
}

impl Monitor {
    pub fn new(tolerances: Tolerances) -> Self {
        Self { tolerances, c: 1.0, e: 1.0, baseline: None, last_retrain_seconds: 0.0, window: Vec::new() }
    }

    /// Records a full retrain: recalibrates `c` and `e` from the closing
    /// window (clamped to at least 1) and resets the baseline.
    pub fn on_retrain(&mut self, baseline_metric: f64, retrain_seconds: f64) {
        if !self.window.is_empty() {
            self.c = max_ratio(self.window.iter().map(|s| (s.true_acc_dis, s.raw_acc_dis)));
            self.e = max_ratio(self.window.iter().map(|s| (s.true_acc_err, s.raw_acc_err)));
        }
        self.window.clear();
        self.baseline = Some(baseline_metric);
        self.last_retrain_seconds = retrain_seconds;
    }

    pub fn proxies(&self, current: f64, unlearn_seconds: f64) -> Result<Proxies> {
        monitor_proxies(current, self.baseline, self.c, self.e, self.last_retrain_seconds, unlearn_seconds)
    }

    /// Unscaled proxies, for calibration.
    pub fn raw(&self, current: f64) -> Result<(f64, f64)> {
        let p = monitor_proxies(current, self.baseline, 1.0, 1.0, 1.0, 1.0)?;
        Ok((p.acc_dis, p.acc_err))
    }

    pub fn record_truth(&mut self, sample: CalibrationSample) {
        self.window.push(sample);
    }
}
