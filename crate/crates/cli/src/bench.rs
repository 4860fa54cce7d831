//! Benchmark runner: every method × seed cell trains, removes a deletion
//! set, retrains from scratch, and reports how far the two models diverge.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{ensure, Context, Result};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;
use unlearn_core::dare::audit_forest;
use unlearn_core::eval::{compare_predictions, param_diff, speedup, EvalReport, Predictions};
use unlearn_core::mechanism::{Method, Trained};
use unlearn_core::rng::tags;
use unlearn_core::trainer::Cost;
use unlearn_core::{train_test_split, Classifier, DatasetTable, RngStream, SampleId};

use crate::config::{BenchConfig, DeletionConfig, DeletionMode, Distribution, MethodConfig};
use crate::dataset::{load_dataset, write_csv};

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Leave clock readings out of the reports so reruns are byte-identical.
    pub deterministic: bool,
    /// Allow writing into a non-empty output directory.
    pub force: bool,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub reports: Vec<EvalReport>,
    /// One line per report that exceeded a configured tolerance.
    pub breaches: Vec<String>,
    pub output_dir: PathBuf,
}

/// A chosen deletion with the loss it had under the trained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeletionRecord {
    pub id: u64,
    pub loss: f64,
    /// Positions the row was picked from; a single entry for uniform draws.
    #[serde(skip)]
    pub candidates: Vec<usize>,
}

/// Negative log-probability of the true label.
pub fn sample_loss(model: &dyn Classifier, data: &DatasetTable, i: usize) -> f64 {
    let p = model.class_probabilities(data.row(i))[data.label(i) as usize];
    -p.max(f64::MIN_POSITIVE).ln()
}

/// Draws `cfg.count` distinct rows of `data`. Worst-of-N picks, for each
/// deletion, the highest-loss row among `cfg.candidates` distinct draws from
/// the rows not yet chosen; ties go to the lowest position.
pub fn select_deletions(
    model: &dyn Classifier,
    data: &DatasetTable,
    cfg: &DeletionConfig,
    rng: RngStream,
) -> Result<Vec<DeletionRecord>> {
    ensure!(cfg.count < data.n(), "cannot delete {} of {} training rows", cfg.count, data.n());
    let mut r = rng.rng();
    let mut remaining: Vec<usize> = (0..data.n()).collect();
    let mut out = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let draws = match cfg.distribution {
            Distribution::Uniform => 1,
            Distribution::WorstOfN => cfg.candidates.clamp(1, remaining.len()),
        };
        let picks: Vec<usize> = sample(&mut r, remaining.len(), draws).into_vec();
        let mut best = picks[0];
        let mut best_loss = sample_loss(model, data, remaining[best]);
        for &k in &picks[1..] {
            let l = sample_loss(model, data, remaining[k]);
            if l > best_loss || (l == best_loss && remaining[k] < remaining[best]) {
                (best, best_loss) = (k, l);
            }
        }
        let candidates = picks.iter().map(|&k| remaining[k]).collect();
        out.push(DeletionRecord { id: data.id(remaining[best]).0, loss: best_loss, candidates });
        remaining.remove(best);
    }
    Ok(out)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs `f` `repeats` times and keeps the first result with the median time.
fn timed_median(repeats: usize, mut f: impl FnMut() -> Result<(Trained, Cost)>) -> Result<(Trained, Cost)> {
    let (out, mut cost) = f()?;
    let mut times = vec![cost.wall_seconds];
    for _ in 1..repeats {
        times.push(f()?.1.wall_seconds);
    }
    cost.wall_seconds = median(times);
    Ok((out, cost))
}

fn remove_all(method: &Method, trained: &Trained, train: &DatasetTable, ids: &[SampleId], mode: DeletionMode, rng: RngStream) -> Result<(Trained, Cost)> {
    match mode {
        DeletionMode::Batch => Ok(method.unlearn(trained, train, ids, rng)?),
        DeletionMode::Sequential => {
            let mut current = train.clone();
            let mut model = trained.clone();
            let mut total = Cost { gradient_evals: 0, wall_seconds: 0.0 };
            for &z in ids {
                let (next, c) = method.unlearn(&model, &current, &[z], rng)?;
                current = current.remove_rows(&[z])?;
                model = next;
                total.gradient_evals += c.gradient_evals;
                total.wall_seconds += c.wall_seconds;
            }
            Ok((model, total))
        }
    }
}

pub fn write_predictions(p: &Predictions, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "label", "predicted", "score", "p0", "p1"])?;
    for i in 0..p.len() {
        w.write_record([
            p.ids[i].0.to_string(),
            p.labels[i].to_string(),
            p.predicted[i].to_string(),
            p.scores[i].to_string(),
            p.probabilities[i][0].to_string(),
            p.probabilities[i][1].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_artifacts(trained: &Trained, train: &DatasetTable, dir: &Path, stem: &str) -> Result<()> {
    match trained {
        Trained::Sisa(m) => m.save(train, &dir.join(stem))?,
        Trained::Dare(f) => f.write(&dir.join(format!("{stem}.ukf")))?,
        other => {
            if let Some(theta) = other.params() {
                fs::write(dir.join(format!("{stem}_params.json")), serde_json::to_vec(&theta)?)?;
            }
        }
    }
    Ok(())
}

/// Everything one cell needs.
pub struct Cell<'a> {
    pub config: &'a BenchConfig,
    pub method: &'a MethodConfig,
    pub seed: u64,
    pub data: &'a DatasetTable,
    /// Artifact directory; `None` skips writing files.
    pub dir: Option<PathBuf>,
}

impl Cell<'_> {
    pub fn run(&self, deterministic: bool) -> Result<EvalReport> {
        let cfg = self.config;
        let method = self.method.to_method(self.data.p())?;
        let root = RngStream::from_seed(self.seed);
        let (train, test) = train_test_split(self.data, cfg.dataset.test_fraction, root.derive(tags::SYNTHETIC))?;
        let (trained, _) = method.train(&train, root).with_context(|| format!("training {}", method.name()))?;

        let deletions = select_deletions(&trained, &train, &cfg.deletion, root.derive(tags::DELETION))?;
        let ids: Vec<SampleId> = deletions.iter().map(|d| SampleId(d.id)).collect();
        let repeats = if deterministic { 1 } else { cfg.timing_repeats };

        let (unlearned, u_cost) = timed_median(repeats, || remove_all(&method, &trained, &train, &ids, cfg.deletion.mode, root))
            .with_context(|| format!("unlearning with {}", method.name()))?;
        let (naive, n_cost) = timed_median(repeats, || Ok(method.naive(&trained, &train, &ids, root)?))
            .context("naive retrain")?;

        let removed = train.select_ids(&ids)?;
        let preds = [
            Predictions::from_model(&unlearned, &test),
            Predictions::from_model(&naive, &test),
            Predictions::from_model(&unlearned, &removed),
            Predictions::from_model(&naive, &removed),
        ];
        let metric = cfg.metric_for(self.method);
        let cmp = compare_predictions(&preds[0], &preds[1], &preds[2], &preds[3], metric)?;

        let theta_diff = match (unlearned.params(), naive.params()) {
            (Some(a), Some(b)) if a.len() == b.len() => Some(param_diff(&a, &b)?),
            _ => None,
        };
        let notes = match &unlearned {
            Trained::Dare(f) => {
                let audit = audit_forest(f, &f.alive_table());
                if audit.is_clean() {
                    format!("audit clean over {} nodes", audit.nodes_checked)
                } else {
                    format!("audit found {} discrepancies", audit.entries.len())
                }
            }
            _ => String::new(),
        };

        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join("deletions.csv"))?;
            for d in &deletions {
                w.serialize(d)?;
            }
            w.flush()?;
            write_predictions(&preds[0], &dir.join("predictions_unlearned.csv"))?;
            write_predictions(&preds[1], &dir.join("predictions_naive.csv"))?;
            write_csv(&train, &dir.join("train.csv"))?;
            write_artifacts(&unlearned, &train, dir, "unlearned")?;
            write_artifacts(&naive, &train.remove_rows(&ids)?, dir, "naive")?;
        }

        let mut report = EvalReport {
            method: self.method.name.clone(),
            dataset: cfg.dataset.describe(),
            deletion: format!("{:?}-{:?}", cfg.deletion.distribution, cfg.deletion.mode).to_lowercase(),
            seed: self.seed,
            deleted: ids.len(),
            metric,
            exact: method.is_exact(),
            speedup: speedup(n_cost.wall_seconds, u_cost.wall_seconds).ok(),
            work_speedup: n_cost.gradient_evals as f64 / u_cost.gradient_evals.max(1) as f64,
            acc_err: cmp.acc_err,
            param_diff: theta_diff,
            disagree_pct: cmp.disagree_pct,
            kl: cmp.kl,
            acc_dis: cmp.acc_dis,
            metric_unlearned_test: cmp.metric_unlearned_test,
            metric_naive_test: cmp.metric_naive_test,
            metric_unlearned_removed: cmp.metric_unlearned_removed,
            metric_naive_removed: cmp.metric_naive_removed,
            unlearn_seconds: Some(u_cost.wall_seconds),
            naive_seconds: Some(n_cost.wall_seconds),
            unlearn_work: u_cost.gradient_evals,
            naive_work: n_cost.gradient_evals,
            sigma: method.declared_sigma(),
            epsilon: cfg.epsilon,
            delta: cfg.delta,
            notes,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs()),
        };
        if deterministic {
            report.scrub_timing();
        }
        report.validate()?;
        Ok(report)
    }
}

/// Output directories must be absent or empty unless `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        let occupied = fs::read_dir(dir)?.next().is_some();
        ensure!(!occupied, "output directory {} is not empty; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn breaches(cfg: &BenchConfig, reports: &[EvalReport]) -> Vec<String> {
    let t = &cfg.tolerances;
    reports
        .iter()
        .filter(|r| r.acc_err > t.acc_err || r.acc_dis > t.acc_dis)
        .map(|r| format!("{} seed {}: acc_err {:.4}, acc_dis {:.4}", r.method, r.seed, r.acc_err, r.acc_dis))
        .collect()
}

pub fn run_benchmark(cfg: &BenchConfig, opts: RunOptions) -> Result<BenchOutcome> {
    let out = cfg.output_dir.clone();
    prepare_output(&out, opts.force)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let data = load_dataset(&cfg.dataset)?;

    let cells: Vec<(usize, &MethodConfig, u64)> = cfg
        .methods
        .iter()
        .enumerate()
        .flat_map(|(k, m)| cfg.seeds.iter().map(move |&s| (k, m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build()?;
    let results: Vec<Result<EvalReport>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(k, m, seed)| {
                let cell = Cell {
                    config: cfg,
                    method: m,
                    seed,
                    data: &data,
                    dir: Some(out.join("cells").join(format!("{k:02}-{}-seed{seed}", m.name))),
                };
                cell.run(opts.deterministic).with_context(|| format!("cell {} seed {seed}", m.name))
            })
            .collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;

    fs::write(out.join("reports.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    let mut w = csv::Writer::from_path(out.join("reports.csv"))?;
    for r in &reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(BenchOutcome { breaches: breaches(cfg, &reports), reports, output_dir: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use unlearn_core::{gaussian_blobs, BlobSpec, LinearModel, LossSpec, ParamVector};

    fn fixture() -> (LinearModel, DatasetTable) {
        let data = gaussian_blobs(&BlobSpec::new(300, 3, 1.0, 4)).unwrap();
        let model = LinearModel::new(ParamVector::new(vec![0.8, -0.3, 0.5, 0.1]), LossSpec::logistic(0.0));
        (model, data)
    }

    #[test]
    fn worst_of_n_picks_candidate_maximum() {
        let (model, data) = fixture();
        let cfg = DeletionConfig { count: 20, distribution: Distribution::WorstOfN, candidates: 15, mode: DeletionMode::Batch };
        let picks = select_deletions(&model, &data, &cfg, RngStream::new(3, 1)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for d in &picks {
            assert!(seen.insert(d.id));
            assert_eq!(d.candidates.len(), 15);
            let pos = data.position(SampleId(d.id)).unwrap();
            assert_eq!(d.loss, sample_loss(&model, &data, pos));
            for &c in &d.candidates {
                assert!(sample_loss(&model, &data, c) <= d.loss);
            }
        }
        assert_eq!(picks, select_deletions(&model, &data, &cfg, RngStream::new(3, 1)).unwrap());
    }

    #[test]
    fn worst_of_n_beats_uniform_on_average() {
        let (model, data) = fixture();
        let mut cfg = DeletionConfig { count: 30, distribution: Distribution::Uniform, candidates: 50, mode: DeletionMode::Batch };
        let mean = |c: &DeletionConfig| {
            let p = select_deletions(&model, &data, c, RngStream::new(9, 2)).unwrap();
            p.iter().map(|d| d.loss).sum::<f64>() / p.len() as f64
        };
        let uniform = mean(&cfg);
        cfg.distribution = Distribution::WorstOfN;
        assert!(mean(&cfg) > uniform);
    }

    #[test]
    fn refuses_to_delete_everything() {
        let (model, data) = fixture();
        let cfg = DeletionConfig { count: 300, ..DeletionConfig::default() };
        assert!(select_deletions(&model, &data, &cfg, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn median_handles_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn non_empty_output_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(prepare_output(dir.path(), false).is_err());
        prepare_output(dir.path(), true).unwrap();
        prepare_output(&dir.path().join("fresh"), false).unwrap();
    }
}
