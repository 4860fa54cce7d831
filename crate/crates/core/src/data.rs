//! Immutable labelled feature tables with stable sample identifiers.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UnlearnError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Row-major `n × p` feature matrix with integer labels and unique ids.
///
/// Tables are values: every operation that "changes" a table returns a new
/// one. The id lookup index is shared between clones.
#[derive(Clone)]
pub struct DatasetTable {
    n: usize,
    p: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
    ids: Vec<SampleId>,
    class_count: u32,
    index: Arc<HashMap<SampleId, usize>>,
}

impl fmt::Debug for DatasetTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DatasetTable")
            .field("n", &self.n)
            .field("p", &self.p)
            .field("class_count", &self.class_count)
            .finish()
    }
}

impl PartialEq for DatasetTable {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.p == other.p
            && self.class_count == other.class_count
            && self.ids == other.ids
            && self.labels == other.labels
            && self
                .features
                .iter()
                .zip(&other.features)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl DatasetTable {
    /// Builds a table from a flat row-major feature buffer.
    pub fn new(
        p: usize,
        features: Vec<f64>,
        labels: Vec<u32>,
        ids: Vec<SampleId>,
        class_count: u32,
    ) -> Result<Self> {
        let n = labels.len();
        if class_count == 0 {
            return Err(UnlearnError::degenerate("class_count must be positive"));
        }
        if features.len() != n * p {
            return Err(UnlearnError::shape(n * p, features.len()));
        }
        if ids.len() != n {
            return Err(UnlearnError::shape(n, ids.len()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(UnlearnError::InvalidConfig(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (pos, id) in ids.iter().enumerate() {
            if index.insert(*id, pos).is_some() {
                return Err(UnlearnError::InvalidConfig(format!("duplicate sample id {id}")));
            }
        }
        Ok(Self {
            n,
            p,
            features,
            labels,
            ids,
            class_count,
            index: Arc::new(index),
        })
    }

    /// Builds a table from row vectors, assigning ids `0..n` in row order.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u32>, class_count: u32) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * p);
        for row in rows {
            if row.len() != p {
                return Err(UnlearnError::shape(p, row.len()));
            }
            features.extend_from_slice(row);
        }
        let ids = (0..rows.len() as u64).map(SampleId).collect();
        Self::new(p, features, labels, ids, class_count)
    }

    pub fn empty(p: usize, class_count: u32) -> Self {
        Self::new(p, Vec::new(), Vec::new(), Vec::new(), class_count)
            .expect("empty table is always valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn class_count(&self) -> u32 {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    pub fn feature(&self, i: usize, j: usize) -> f64 {
        self.features[i * self.p + j]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> SampleId {
        self.ids[i]
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn position(&self, id: SampleId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.index.contains_key(&id)
    }

    /// Positions of `ids` in this table, in the order given.
    pub fn positions_of(&self, ids: &[SampleId]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| self.position(id).ok_or(UnlearnError::MissingSample(id)))
            .collect()
    }

    /// New table holding the rows at `positions`, in that order.
    pub fn select_positions(&self, positions: &[usize]) -> DatasetTable {
        let mut features = Vec::with_capacity(positions.len() * self.p);
        let mut labels = Vec::with_capacity(positions.len());
        let mut ids = Vec::with_capacity(positions.len());
        for &i in positions {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            ids.push(self.ids[i]);
        }
        DatasetTable::new(self.p, features, labels, ids, self.class_count)
            .expect("subset of a valid table is valid")
    }

    /// New table holding the rows with the given ids, in the order given.
    pub fn select_ids(&self, ids: &[SampleId]) -> Result<DatasetTable> {
        Ok(self.select_positions(&self.positions_of(ids)?))
    }

    /// The table without the rows in `ids`; survivors keep their order.
    pub fn remove_rows(&self, ids: &[SampleId]) -> Result<DatasetTable> {
        let mut drop = HashSet::with_capacity(ids.len());
        for &id in ids {
            if !self.contains(id) {
                return Err(UnlearnError::MissingSample(id));
            }
            drop.insert(id);
        }
        let keep: Vec<usize> = (0..self.n).filter(|&i| !drop.contains(&self.ids[i])).collect();
        Ok(self.select_positions(&keep))
    }

    /// Appends the rows of `other` (ids must stay unique).
    pub fn concat(&self, other: &DatasetTable) -> Result<DatasetTable> {
        if other.p != self.p && !other.is_empty() {
            return Err(UnlearnError::shape(self.p, other.p));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        DatasetTable::new(
            self.p,
            features,
            labels,
            ids,
            self.class_count.max(other.class_count),
        )
    }

    /// Copy of this table with rows replaced through `f(position, row, label)`.
    pub fn map_rows(&self, mut f: impl FnMut(usize, &mut [f64], &mut u32)) -> DatasetTable {
        let mut features = self.features.clone();
        let mut labels = self.labels.clone();
        for i in 0..self.n {
            f(i, &mut features[i * self.p..(i + 1) * self.p], &mut labels[i]);
        }
        DatasetTable::new(self.p, features, labels, self.ids.clone(), self.class_count)
            .expect("mapped labels stay within class_count")
    }

    /// Number of rows per label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count as usize];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }
}
