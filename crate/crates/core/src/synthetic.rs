//! Synthetic two-class Gaussian blob fixtures and train/test splitting.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::rng::{standard_normal, tags, RngStream};

/// Two Gaussian blobs with unit variance. The class means differ by
/// `class_sep` in each of the first `informative` coordinates; the remaining
/// coordinates are pure noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n: usize,
    pub p: usize,
    pub class_sep: f64,
    /// Defaults to all `p` coordinates.
    #[serde(default)]
    pub informative: Option<usize>,
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(n: usize, p: usize, class_sep: f64, seed: u64) -> Self {
        Self { n, p, class_sep, informative: None, seed }
    }

    pub fn with_informative(mut self, k: usize) -> Self {
        self.informative = Some(k);
        self
    }
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self::new(2000, 10, 2.0, 0)
    }
}

/// Balanced blobs: exactly `n/2` rows of class 0 (one more of class 1 when
/// `n` is odd), in shuffled order, ids `0..n`.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<DatasetTable> {
    let informative = spec.informative.unwrap_or(spec.p);
    if informative > spec.p {
        return Err(UnlearnError::InvalidConfig(format!(
            "informative = {informative} exceeds p = {}",
            spec.p
        )));
    }
    if !spec.class_sep.is_finite() {
        return Err(UnlearnError::InvalidConfig("class_sep must be finite".into()));
    }
    let stream = RngStream::from_seed(spec.seed).derive(tags::SYNTHETIC);
    let mut rng = stream.rng();
    let mut labels: Vec<u32> = (0..spec.n).map(|i| u32::from(i >= spec.n / 2)).collect();
    labels.shuffle(&mut rng);
    let half = spec.class_sep / 2.0;
    let mut features = Vec::with_capacity(spec.n * spec.p);
    for &y in &labels {
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for j in 0..spec.p {
            let mean = if j < informative { sign * half } else { 0.0 };
            features.push(mean + standard_normal(&mut rng));
        }
    }
    let ids = (0..spec.n as u64).map(SampleId).collect();
    DatasetTable::new(spec.p, features, labels, ids, 2)
}

/// Random split keeping ids. Row order inside each part follows the original
/// table.
pub fn train_test_split(
    data: &DatasetTable,
    test_fraction: f64,
    rng: RngStream,
) -> Result<(DatasetTable, DatasetTable)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(UnlearnError::InvalidConfig(format!(
            "test_fraction {test_fraction} outside [0, 1)"
        )));
    }
    let n_test = (data.n() as f64 * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.shuffle(&mut rng.rng());
    let mut is_test = vec![false; data.n()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let train: Vec<usize> = (0..data.n()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..data.n()).filter(|&i| is_test[i]).collect();
    Ok((data.select_positions(&train), data.select_positions(&test)))
}
