use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SampleId};

use super::node::{best_split, value_groups, DareNode, NodeKind, ThresholdStats};
use super::DareForest;

/// One statistic that disagrees with its from-scratch recomputation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub tree: usize,
    /// `root`, then `L`/`R` steps.
    pub path: String,
    pub field: String,
    pub expected: String,
    pub found: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    pub nodes_checked: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tree,path,field,expected,found\n");
        for e in &self.entries {
            writeln!(s, "{},{},{},{},{}", e.tree, e.path, e.field, e.expected, e.found).expect("string write");
        }
        s
    }
}

struct Auditor<'a> {
    forest: &'a DareForest,
    data: &'a DatasetTable,
    tree: usize,
    report: AuditReport,
}

impl Auditor<'_> {
    fn check<T: PartialEq + std::fmt::Display>(&mut self, path: &str, field: &str, expected: T, found: T) {
        if expected != found {
            self.report.entries.push(AuditEntry {
                tree: self.tree,
                path: path.to_string(),
                field: field.to_string(),
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
    }

    fn node(&mut self, node: &DareNode, rows: Vec<usize>, path: String) {
        self.report.nodes_checked += 1;
        let data = self.data;
        let n = rows.len() as u32;
        let n_pos: u32 = rows.iter().map(|&i| data.label(i)).sum();
        self.check(&path, "n", n, node.n);
        self.check(&path, "n_pos", n_pos, node.n_pos);
        let pure = n_pos == 0 || n_pos == n;
        match &node.kind {
            NodeKind::Leaf { members } => {
                let mut expected: Vec<SampleId> = rows.iter().map(|&i| data.id(i)).collect();
                expected.sort_unstable();
                let mut found: Vec<SampleId> =
                    members.iter().map(|&m| self.forest.data().id(m as usize)).collect();
                found.sort_unstable();
                if expected != found {
                    let missing = expected.iter().filter(|id| found.binary_search(id).is_err()).count();
                    let extra = found.iter().filter(|id| expected.binary_search(id).is_err()).count();
                    self.check(&path, "members", format!("{} rows", expected.len()), format!(
                        "{} rows ({missing} missing, {extra} extra)",
                        found.len()
                    ));
                }
                let splittable = !pure
                    && node.depth < self.forest.params.d_max
                    && (0..data.p()).any(|a| {
                        rows.iter().any(|&i| data.feature(i, a) != data.feature(rows[0], a))
                    });
                self.check(&path, "leaf_stop", false, splittable);
                return;
            }
            NodeKind::Random { attr, threshold, a_min, a_max, .. } => {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let x = data.feature(i, *attr);
                    (lo.min(x), hi.max(x))
                });
                self.check(&path, "a_min", lo, *a_min);
                self.check(&path, "a_max", hi, *a_max);
                self.check(&path, "threshold_in_range", true, *a_min <= *threshold && *threshold < *a_max);
                self.check(&path, "impure", true, !pure);
            }
            NodeKind::Greedy { attr, threshold, candidates, .. } => {
                let positions: Vec<u32> = rows.iter().map(|&i| i as u32).collect();
                for c in candidates {
                    let groups = value_groups(data, &positions, c.attr);
                    for t in &c.thresholds {
                        let at = format!("{path}/a{}@{}", c.attr, t.value);
                        self.threshold(&at, &groups, t);
                    }
                }
                let best = best_split(candidates).map(|(a, v)| format!("a{a}@{v}"));
                self.check(&path, "best_split", best.unwrap_or_default(), format!("a{attr}@{threshold}"));
                self.check(&path, "impure", true, !pure);
            }
        }
        let (attr, threshold) = node.split().expect("split node");
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| data.feature(i, attr) <= threshold);
        let (left, right) = node.children().expect("split node");
        self.node(left, l, format!("{path}L"));
        self.node(right, r, format!("{path}R"));
    }

    fn threshold(&mut self, at: &str, groups: &[(f64, u32, u32)], t: &ThresholdStats) {
        let v = t.value;
        let (mut left_n, mut left_pos, mut right_n, mut right_pos) = (0, 0, 0, 0);
        for g in groups {
            if g.0 <= v {
                left_n += g.1;
                left_pos += g.2;
            } else {
                right_n += g.1;
                right_pos += g.2;
            }
        }
        self.check(at, "left_n", left_n, t.left_n);
        self.check(at, "left_pos", left_pos, t.left_pos);
        self.check(at, "right_n", right_n, t.right_n);
        self.check(at, "right_pos", right_pos, t.right_pos);
        let lower = groups.iter().rev().find(|g| g.0 <= v).copied();
        let upper = groups.iter().find(|g| g.0 > v).copied();
        match (lower, upper) {
            (Some(lo), Some(hi)) => {
                self.check(at, "lower", lo.0, t.lower);
                self.check(at, "lower_n", lo.1, t.lower_n);
                self.check(at, "lower_pos", lo.2, t.lower_pos);
                self.check(at, "upper", hi.0, t.upper);
                self.check(at, "upper_n", hi.1, t.upper_n);
                self.check(at, "upper_pos", hi.2, t.upper_pos);
                self.check(at, "midpoint", lo.0 + (hi.0 - lo.0) / 2.0, v);
                self.check(at, "valid", true, t.is_valid());
            }
            _ => self.check(at, "valid", "adjacent values on both sides", "threshold outside the data"),
        }
    }
}

/// Recomputes every node statistic of `forest` from `data` (the rows that
/// should currently be in the forest) and lists each disagreement.
pub fn audit_forest(forest: &DareForest, data: &DatasetTable) -> AuditReport {
    let mut auditor = Auditor { forest, data, tree: 0, report: AuditReport::default() };
    for (t, tree) in forest.trees.iter().enumerate() {
        auditor.tree = t;
        auditor.node(&tree.root, (0..data.n()).collect(), "root".to_string());
    }
    auditor.report
}
