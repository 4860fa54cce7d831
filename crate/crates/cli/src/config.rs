//! Benchmark configuration: a TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use unlearn_core::d2d::{ChainMode, D2DConfig};
use unlearn_core::dare::DareParams;
use unlearn_core::deltagrad::DeltaGradConfig;
use unlearn_core::eval::{Metric, Tolerances};
use unlearn_core::mechanism::Method;
use unlearn_core::sisa::{Aggregation, SisaConfig};
use unlearn_core::trainer::{BatchMode, Init, Schedule, TrainConfig};
use unlearn_core::LossSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Every cell runs once per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub deletion: DeletionConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    /// Defaults to accuracy, or R² for squared loss.
    #[serde(default)]
    pub metric: Option<Metric>,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default = "default_repeats")]
    pub timing_repeats: usize,
    /// Declared certifiability parameters, copied onto reports.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
}

fn default_name() -> String {
    "bench".into()
}

fn default_repeats() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_p")]
    pub p: usize,
    #[serde(default = "d_sep")]
    pub class_sep: f64,
    #[serde(default)]
    pub informative: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "d_label")]
    pub label_column: String,
    #[serde(default)]
    pub id_column: Option<String>,
    #[serde(default = "d_test")]
    pub test_fraction: f64,
}

fn d_n() -> usize {
    2000
}
fn d_p() -> usize {
    10
}
fn d_sep() -> f64 {
    2.0
}
fn d_label() -> String {
    "label".into()
}
fn d_test() -> f64 {
    0.2
}

impl DatasetConfig {
    pub fn synthetic(n: usize, p: usize, class_sep: f64, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic,
            n,
            p,
            class_sep,
            informative: None,
            seed,
            path: None,
            label_column: d_label(),
            id_column: None,
            test_fraction: d_test(),
        }
    }

    pub fn describe(&self) -> String {
        match self.source {
            DataSource::Synthetic => format!("blobs-n{}-p{}-sep{}-s{}", self.n, self.p, self.class_sep, self.seed),
            DataSource::Csv => self.path.as_deref().map(|p| p.display().to_string()).unwrap_or_default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Logistic,
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    Constant,
    InverseTime,
}

/// Flat hyperparameters for every method; each method reads its own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub name: String,
    pub loss: LossName,
    pub lambda: f64,
    pub steps: usize,
    pub eta: f64,
    pub schedule: ScheduleName,
    /// Zero means full batch.
    pub batch_size: usize,
    /// Zero means zero initialization.
    pub init_scale: f64,
    pub shards: usize,
    pub slices: usize,
    pub epochs_per_slice: Option<usize>,
    pub mean_probability: bool,
    pub trees: usize,
    pub d_max: usize,
    pub d_rmax: usize,
    pub k: usize,
    pub p_tilde: Option<usize>,
    pub sigma: f64,
    pub removal_batch: Option<usize>,
    pub burn_in: usize,
    pub period: usize,
    pub history_size: usize,
    pub imperfect: bool,
    pub budget: usize,
    pub radius: Option<f64>,
    pub blocks: usize,
    pub eps: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: "naive".into(),
            loss: LossName::Logistic,
            lambda: 0.01,
            steps: 100,
            eta: 1.0,
            schedule: ScheduleName::Constant,
            batch_size: 0,
            init_scale: 0.0,
            shards: 4,
            slices: 5,
            epochs_per_slice: None,
            mean_probability: false,
            trees: 10,
            d_max: 10,
            d_rmax: 1,
            k: 5,
            p_tilde: None,
            sigma: 0.0,
            removal_batch: None,
            burn_in: 10,
            period: 5,
            history_size: 2,
            imperfect: false,
            budget: 20,
            radius: None,
            blocks: 8,
            eps: 0.01,
        }
    }
}

impl MethodConfig {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), ..Self::default() }
    }

    pub fn spec(&self) -> LossSpec {
        match self.loss {
            LossName::Logistic => LossSpec::logistic(self.lambda),
            LossName::Squared => LossSpec::squared(self.lambda),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            schedule: match self.schedule {
                ScheduleName::Constant => Schedule::Constant { eta: self.eta },
                ScheduleName::InverseTime => Schedule::InverseTime { eta: self.eta },
            },
            batch: if self.batch_size == 0 { BatchMode::Full } else { BatchMode::Minibatch { size: self.batch_size } },
            init: if self.init_scale == 0.0 { Init::Zeros } else { Init::Gaussian { scale: self.init_scale } },
        }
    }

    /// Builds the core method for data with `p` features.
    pub fn to_method(&self, p: usize) -> Result<Method> {
        let (spec, train) = (self.spec(), self.train());
        Ok(match self.name.as_str() {
            "naive" => Method::Naive { spec, train },
            "sisa" => {
                let mut config = SisaConfig::new(self.shards, self.slices, self.epochs_per_slice.unwrap_or(self.steps), train);
                if self.mean_probability {
                    config.aggregation = Aggregation::MeanProbability;
                }
                Method::Sisa { spec, config }
            }
            "dare" => Method::Dare {
                params: DareParams {
                    trees: self.trees,
                    d_max: self.d_max,
                    d_rmax: self.d_rmax,
                    k: self.k,
                    p_tilde: self.p_tilde.unwrap_or_else(|| (p as f64).sqrt().ceil().max(1.0) as usize),
                },
            },
            "fisher" => Method::Fisher { spec, train, sigma: self.sigma, batch_size: self.removal_batch },
            "influence" => Method::Influence { spec, train, objective_sigma: self.sigma, batch_size: self.removal_batch },
            "deltagrad" => Method::DeltaGrad {
                spec,
                train,
                config: DeltaGradConfig {
                    burn_in: self.burn_in,
                    period: self.period,
                    history_size: self.history_size,
                    post_noise: self.sigma,
                },
            },
            "d2d" => {
                let mode = if self.imperfect { ChainMode::Imperfect } else { ChainMode::Perfect };
                let mut config = D2DConfig::new(mode, self.budget, self.sigma, self.eta);
                config.schedule = train.schedule;
                config.radius = self.radius;
                Method::D2D { spec, train, config }
            }
            "deepobliviate" => Method::DeepObliviate { spec, train, blocks: self.blocks, eps: self.eps },
            other => bail!(
                "unknown method `{other}`; expected one of naive, sisa, dare, fisher, influence, deltagrad, d2d, deepobliviate"
            ),
        })
    }

    pub fn default_metric(&self) -> Metric {
        if self.loss == LossName::Squared && self.name != "dare" {
            Metric::R2
        } else {
            Metric::Accuracy
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Uniform,
    /// Each deletion is the highest-loss row among `candidates` uniform draws.
    WorstOfN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionMode {
    Batch,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeletionConfig {
    pub count: usize,
    pub distribution: Distribution,
    pub candidates: usize,
    pub mode: DeletionMode,
}

impl Default for DeletionConfig {
    fn default() -> Self {
        Self { count: 10, distribution: Distribution::Uniform, candidates: 1000, mode: DeletionMode::Batch }
    }
}

/// Report-level tolerances; a breach makes the run exit with status 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    pub acc_err: f64,
    pub acc_dis: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { acc_err: f64::INFINITY, acc_dis: f64::INFINITY }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub deletions: usize,
    /// Proxy tolerances that trigger a full retrain.
    pub acc_dis: f64,
    pub acc_err: f64,
    /// Also retrain after this many deletions since the last retrain.
    pub retrain_every: Option<usize>,
    /// Compute the naive retrain at every step to log true values.
    pub oracle: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { deletions: 30, acc_dis: f64::INFINITY, acc_err: f64::INFINITY, retrain_every: None, oracle: true }
    }
}

impl StreamConfig {
    pub fn tolerances(&self) -> Tolerances {
        Tolerances { acc_dis: self.acc_dis, acc_err: self.acc_err }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("parsing config TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: BenchConfig = toml::Value::Table(table).try_into().context("interpreting config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), "config needs at least one seed in `seeds`");
        ensure!(!self.methods.is_empty(), "config needs at least one `[[methods]]` entry");
        ensure!(self.timing_repeats >= 1, "timing_repeats must be at least 1");
        ensure!((0.0..1.0).contains(&self.dataset.test_fraction), "dataset.test_fraction must lie in [0, 1)");
        if self.dataset.source == DataSource::Csv {
            let path = self.dataset.path.as_ref().context("dataset.path is required for csv sources")?;
            ensure!(path.exists(), "dataset file {} does not exist", path.display());
        }
        for m in &self.methods {
            m.to_method(self.dataset.p)?;
        }
        Ok(())
    }

    pub fn metric_for(&self, m: &MethodConfig) -> Metric {
        self.metric.unwrap_or_else(|| m.default_metric())
    }
}

/// Sets `a.b.c = value` in a TOML table. Numeric segments index arrays and
/// the value is parsed as TOML, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').with_context(|| format!("override `{assignment}` is not key=value"))?;
    let value = parse_value(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    ensure!(keys.iter().all(|k| !k.is_empty()), "override key `{path}` has an empty segment");
    let mut cur = table;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        let next_is_index = !last && keys[i + 1].parse::<usize>().is_ok();
        if last {
            cur.insert((*key).into(), value);
            return Ok(());
        }
        let entry = cur.entry(*key).or_insert_with(|| {
            if next_is_index { toml::Value::Array(Vec::new()) } else { toml::Value::Table(toml::Table::new()) }
        });
        if next_is_index {
            let arr = entry.as_array_mut().with_context(|| format!("`{key}` is not an array"))?;
            let idx: usize = keys[i + 1].parse()?;
            ensure!(idx < arr.len(), "index {idx} out of range for `{key}`");
            if i + 2 == keys.len() {
                arr[idx] = value;
                return Ok(());
            }
            return apply_override(
                arr[idx].as_table_mut().with_context(|| format!("`{key}.{idx}` is not a table"))?,
                &format!("{}={}", keys[i + 2..].join("."), raw),
            );
        }
        cur = entry.as_table_mut().with_context(|| format!("`{key}` is not a table"))?;
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.into()))
}
