//! Fixtures shared by the unit tests.

use nalgebra::DMatrix;
use rand::Rng;

use crate::data::DatasetTable;
use crate::rng::{standard_normal, RngStream};

pub use crate::linalg::ridge_closed_form;

/// `n × p` table of standard normal features with {0, 1} labels from a noisy
/// linear rule, so both classes appear.
pub fn random_table(n: usize, p: usize, seed: u64) -> DatasetTable {
    let mut rng = RngStream::new(seed, 0xfeed).rng();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..p).map(|_| standard_normal(&mut rng)).collect();
        let score: f64 = row.iter().enumerate().map(|(j, v)| v / (j + 1) as f64).sum::<f64>()
            + 0.5 * standard_normal(&mut rng);
        labels.push(u32::from(score > 0.0));
        rows.push(row);
    }
    DatasetTable::from_rows(&rows, labels, 2).unwrap()
}

pub fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = RngStream::new(seed, 0x5bd).rng();
    let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}
