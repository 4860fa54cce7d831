//! Re-derivation checks on persisted models.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use unlearn_core::dare::{audit_forest, AuditReport, DareForest};
use unlearn_core::sisa::{sisa_train_with_assignment, SisaModel};

use crate::dataset::{exported_schema, read_csv};

/// Recomputes every cached DaRE statistic from the forest's live rows.
pub fn audit_dare(forest_path: &Path) -> Result<AuditReport> {
    let forest = DareForest::read(forest_path).with_context(|| format!("reading forest {}", forest_path.display()))?;
    Ok(audit_forest(&forest, &forest.alive_table()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SisaAudit {
    pub checkpoints: usize,
    /// Largest per-coordinate gap between stored and retrained checkpoints.
    pub max_abs_diff: f64,
}

impl SisaAudit {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs_diff <= tol
    }
}

/// Retrains a saved SISA model from its own assignment and seeds on the rows
/// of `data_csv` (as written by the benchmark) and compares every checkpoint.
pub fn audit_sisa(model_dir: &Path, data_csv: &Path) -> Result<SisaAudit> {
    let model = SisaModel::load(model_dir).with_context(|| format!("loading SISA model {}", model_dir.display()))?;
    let data = read_csv(data_csv, &exported_schema(2))?;
    let fresh = sisa_train_with_assignment(&data, &model.spec, &model.config, model.assignment.clone(), model.rng)?;
    ensure!(fresh.checkpoints.len() == model.checkpoints.len(), "shard count mismatch");
    let mut max_abs_diff: f64 = 0.0;
    let mut checkpoints = 0;
    for (a, b) in model.checkpoints.iter().flatten().zip(fresh.checkpoints.iter().flatten()) {
        ensure!(a.len() == b.len(), "checkpoint dimension mismatch");
        checkpoints += 1;
        max_abs_diff = max_abs_diff.max(a.max_abs_diff(b));
    }
    Ok(SisaAudit { checkpoints, max_abs_diff })
}
