//! Deletion-stream simulation: one deletion at a time, proxy monitoring, and
//! a full retrain whenever a proxy reaches its tolerance.

use std::fs;
use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use serde::Serialize;
use unlearn_core::eval::{acc_err, evaluate_metric, sape, CalibrationSample, Metric, Monitor};
use unlearn_core::mechanism::Trained;
use unlearn_core::rng::tags;
use unlearn_core::{train_test_split, DatasetTable, RngStream, SampleId};

use crate::bench::{prepare_output, select_deletions, RunOptions};
use crate::config::{BenchConfig, DeletionConfig, MethodConfig};
use crate::dataset::load_dataset;

/// One logged deletion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamStep {
    pub step: usize,
    pub id: u64,
    pub metric: f64,
    pub tilde_acc_dis: f64,
    pub tilde_acc_err: f64,
    /// Proxies before scaling by `c` and `e`.
    pub raw_acc_dis: f64,
    pub raw_acc_err: f64,
    /// Omitted in deterministic mode.
    pub tilde_speedup: Option<f64>,
    /// Present when the oracle retrain runs at every step.
    pub true_acc_dis: Option<f64>,
    pub true_acc_err: Option<f64>,
    /// Scales in force when the proxies were computed.
    pub c: f64,
    pub e: f64,
    pub retrained: bool,
    pub reason: String,
}

impl StreamStep {
    /// Whether the proxies bound the true values; `None` without an oracle.
    pub fn overestimates(&self) -> Option<bool> {
        Some(self.tilde_acc_dis >= self.true_acc_dis? && self.tilde_acc_err >= self.true_acc_err?)
    }
}

/// Per step, the constants calibrated when that step's window closes: at
/// its retrain, or at the end of the stream for the last open window.
pub fn window_constants(log: &[StreamStep]) -> Vec<(f64, f64)> {
    let ratio = |pairs: &mut dyn Iterator<Item = (f64, f64)>| {
        pairs.filter(|&(_, raw)| raw > 0.0).map(|(t, raw)| t / raw).fold(1.0, f64::max)
    };
    let mut out = Vec::with_capacity(log.len());
    let mut start = 0;
    for (i, s) in log.iter().enumerate() {
        if s.retrained || i + 1 == log.len() {
            let w = &log[start..=i];
            let c = ratio(&mut w.iter().map(|s| (s.true_acc_dis.unwrap_or(0.0), s.raw_acc_dis)));
            let e = ratio(&mut w.iter().map(|s| (s.true_acc_err.unwrap_or(0.0), s.raw_acc_err)));
            out.extend(std::iter::repeat_n((c, e), w.len()));
            start = i + 1;
        }
    }
    out
}

pub fn simulate_stream(cfg: &BenchConfig, mc: &MethodConfig, seed: u64, data: &DatasetTable, deterministic: bool) -> Result<Vec<StreamStep>> {
    let sc = &cfg.stream;
    let method = mc.to_method(data.p())?;
    let metric: Metric = cfg.metric_for(mc);
    let root = RngStream::from_seed(seed);
    let (train, test) = train_test_split(data, cfg.dataset.test_fraction, root.derive(tags::SYNTHETIC))?;
    let (original, train_cost) = method.train(&train, root)?;

    let del_cfg = DeletionConfig { count: sc.deletions, ..cfg.deletion.clone() };
    let ids: Vec<SampleId> = select_deletions(&original, &train, &del_cfg, root.derive(tags::DELETION))?
        .into_iter()
        .map(|d| SampleId(d.id))
        .collect();

    let mut monitor = Monitor::new(sc.tolerances());
    monitor.on_retrain(evaluate_metric(&original, &test, metric)?, train_cost.wall_seconds);
    let mut model = original.clone();
    let mut current = train.clone();
    let mut since_retrain = 0;
    let mut log = Vec::with_capacity(ids.len());

    for (step, &z) in ids.iter().enumerate() {
        let (next, cost) = method.unlearn(&model, &current, &[z], root).with_context(|| format!("step {step}"))?;
        model = next;
        current = current.remove_rows(&[z])?;
        since_retrain += 1;

        let metric_now = evaluate_metric(&model, &test, metric)?;
        let proxies = monitor.proxies(metric_now, cost.wall_seconds)?;
        let (raw_dis, raw_err) = monitor.raw(metric_now)?;
        let removed = &ids[..=step];
        let naive_now = || -> Result<(Trained, f64)> {
            let (n, c) = method.naive(&original, &train, removed, root)?;
            Ok((n, c.wall_seconds))
        };

        let mut oracle = None;
        let (mut true_dis, mut true_err) = (None, None);
        if sc.oracle {
            let (naive, secs) = naive_now()?;
            let deleted = train.select_ids(removed)?;
            let d = sape(evaluate_metric(&model, &deleted, metric)?, evaluate_metric(&naive, &deleted, metric)?);
            let e = acc_err(metric_now, evaluate_metric(&naive, &test, metric)?);
            monitor.record_truth(CalibrationSample { raw_acc_dis: raw_dis, raw_acc_err: raw_err, true_acc_dis: d, true_acc_err: e });
            (true_dis, true_err) = (Some(d), Some(e));
            oracle = Some((naive, secs));
        }

        let breach = monitor.tolerances.breached(&proxies);
        let periodic = sc.retrain_every.is_some_and(|k| since_retrain >= k);
        let reason = match (breach, periodic) {
            (true, _) => "tolerance",
            (false, true) => "periodic",
            _ => "",
        };
        log.push(StreamStep {
            step,
            id: z.0,
            metric: metric_now,
            tilde_acc_dis: proxies.acc_dis,
            tilde_acc_err: proxies.acc_err,
            raw_acc_dis: raw_dis,
            raw_acc_err: raw_err,
            tilde_speedup: if deterministic { None } else { proxies.speedup },
            true_acc_dis: true_dis,
            true_acc_err: true_err,
            c: monitor.c,
            e: monitor.e,
            retrained: breach || periodic,
            reason: reason.into(),
        });
        if breach || periodic {
            let (naive, secs) = match oracle {
                Some(o) => o,
                None => naive_now()?,
            };
            monitor.on_retrain(evaluate_metric(&naive, &test, metric)?, secs);
            model = naive;
            since_retrain = 0;
        }
    }
    Ok(log)
}

/// Runs a stream for every method and seed and writes one CSV log each.
pub fn run_streams(cfg: &BenchConfig, opts: RunOptions) -> Result<Vec<(PathBuf, Vec<StreamStep>)>> {
    ensure!(cfg.stream.deletions > 0, "stream.deletions must be positive");
    prepare_output(&cfg.output_dir, opts.force)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    let data = load_dataset(&cfg.dataset)?;
    let mut out = Vec::new();
    for (k, mc) in cfg.methods.iter().enumerate() {
        for &seed in &cfg.seeds {
            let log = simulate_stream(cfg, mc, seed, &data, opts.deterministic)
                .with_context(|| format!("stream for {} seed {seed}", mc.name))?;
            let path = cfg.output_dir.join(format!("stream_{k:02}-{}-seed{seed}.csv", mc.name));
            let mut w = csv::Writer::from_path(&path)?;
            for s in &log {
                w.serialize(s)?;
            }
            w.flush()?;
            out.push((path, log));
        }
    }
    Ok(out)
}
