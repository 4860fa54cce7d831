use rand::seq::SliceRandom;

use super::node::{best_split, valid_thresholds, value_groups};
use super::*;
use crate::synthetic::{gaussian_blobs, BlobSpec};

fn params(d_rmax: usize) -> DareParams {
    DareParams { trees: 3, d_max: 6, d_rmax, k: 5, p_tilde: 3 }
}

fn blobs(n: usize, seed: u64) -> DatasetTable {
    gaussian_blobs(&BlobSpec::new(n, 4, 1.0, seed)).unwrap()
}

fn leaf(values: (u32, u32), members: Vec<u32>) -> DareNode {
    DareNode { depth: 0, n: values.0, n_pos: values.1, kind: NodeKind::Leaf { members } }
}

#[test]
fn no_random_nodes_when_d_rmax_is_zero() {
    let f = dare_train(&blobs(300, 1), params(0), RngStream::from_seed(0)).unwrap();
    assert_eq!(f.random_node_count(), 0);
    let g = dare_train(&blobs(300, 1), params(2), RngStream::from_seed(0)).unwrap();
    assert!(g.random_node_count() > 0);
}

#[test]
fn single_class_gives_single_leaf() {
    let t = blobs(50, 2).map_rows(|_, _, y| *y = 1);
    let f = dare_train(&t, params(1), RngStream::from_seed(0)).unwrap();
    for tree in &f.trees {
        assert!(matches!(tree.root.kind, NodeKind::Leaf { .. }));
        assert_eq!(tree.root.value(), 1.0);
    }
    assert_eq!(dare_predict(&f, t.row(0)).unwrap(), 1.0);
}

/// Exhaustive search over every valid threshold of every attribute.
fn brute_force_root(t: &DatasetTable) -> (usize, f64) {
    let mut best: Option<(f64, usize, f64)> = None;
    for a in 0..t.p() {
        let xs: Vec<f64> = (0..t.n()).map(|i| t.feature(i, a)).collect();
        let mut distinct = xs.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        for w in distinct.windows(2) {
            let v = w[0] + (w[1] - w[0]) / 2.0;
            let labels_at = |x: f64| -> Vec<u32> { (0..t.n()).filter(|&i| xs[i] == x).map(|i| t.label(i)).collect() };
            let (lo, hi) = (labels_at(w[0]), labels_at(w[1]));
            let pure_same = lo.iter().chain(&hi).all(|&y| y == lo[0]);
            if pure_same {
                continue;
            }
            let (mut ln, mut lp, mut rn, mut rp) = (0.0, 0.0, 0.0, 0.0);
            for (i, &x) in xs.iter().enumerate() {
                let y = t.label(i) as f64;
                if x <= v {
                    ln += 1.0;
                    lp += y;
                } else {
                    rn += 1.0;
                    rp += y;
                }
            }
            let g = |n: f64, p: f64| 2.0 * (p / n) * (1.0 - p / n);
            let score = (ln * g(ln, lp) + rn * g(rn, rp)) / (ln + rn);
            if best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, a, v));
            }
        }
    }
    let (_, a, v) = best.unwrap();
    (a, v)
}

#[test]
fn root_split_matches_exhaustive_search() {
    for seed in 0..5 {
        let t = gaussian_blobs(&BlobSpec::new(30, 4, 1.0, seed)).unwrap();
        let p = DareParams { trees: 2, d_max: 3, d_rmax: 0, k: 100, p_tilde: 4 };
        let f = dare_train(&t, p, RngStream::from_seed(seed)).unwrap();
        for tree in &f.trees {
            assert_eq!(tree.root.split(), Some(brute_force_root(&t)), "seed {seed}");
        }
    }
}

#[test]
fn prediction_is_mean_of_leaves() {
    let t = blobs(10, 0);
    let tree = |v: (u32, u32)| DareTree { root: leaf(v, vec![]), rng: RngStream::from_seed(0), ops: 0 };
    let one = DareForest::from_parts(DareParams { trees: 1, ..params(0) }, vec![tree((4, 1))], t.clone());
    assert_eq!(dare_predict(&one, t.row(0)).unwrap(), 0.25);
    let two = DareForest::from_parts(params(0), vec![tree((5, 1)), tree((5, 3))], t.clone());
    assert!((dare_predict(&two, t.row(0)).unwrap() - 0.4).abs() < 1e-15);
    let pure = DareForest::from_parts(params(0), vec![tree((3, 3)), tree((1, 1))], t.clone());
    assert_eq!(dare_predict(&pure, t.row(0)).unwrap(), 1.0);
    assert!(dare_predict(&pure, &[0.0]).is_err());
}

#[test]
fn deleting_only_positive_of_a_mixed_leaf() {
    // depth limit 0 keeps everything in one mixed leaf
    let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
    let t = DatasetTable::from_rows(&rows, vec![0, 1, 0], 2).unwrap();
    let p = DareParams { trees: 1, d_max: 0, d_rmax: 0, k: 1, p_tilde: 1 };
    let f = dare_train(&t, p, RngStream::from_seed(0)).unwrap();
    assert!((f.trees[0].root.value() - 1.0 / 3.0).abs() < 1e-15);
    let (g, cost) = dare_unlearn(&f, SampleId(1)).unwrap();
    assert_eq!(g.trees[0].root.value(), 0.0);
    assert_eq!(cost.samples_retrained, 0);
    assert!(audit_forest(&g, &g.alive_table()).is_clean());
}

#[test]
fn fresh_forest_passes_audit() {
    let t = blobs(400, 3);
    let f = dare_train(&t, params(2), RngStream::from_seed(1)).unwrap();
    let r = audit_forest(&f, &t);
    assert!(r.is_clean(), "{:?}", r.entries);
    assert_eq!(r.nodes_checked, f.node_count());
}

#[test]
fn audit_holds_after_many_deletions() {
    let t = blobs(500, 4);
    let mut f = dare_train(&t, params(2), RngStream::from_seed(2)).unwrap();
    let mut ids = t.ids().to_vec();
    ids.shuffle(&mut RngStream::from_seed(7).rng());
    for &id in &ids[..100] {
        f.delete(id).unwrap();
    }
    let survivors = t.remove_rows(&ids[..100]).unwrap();
    assert_eq!(f.alive_table(), survivors);
    let r = audit_forest(&f, &survivors);
    assert!(r.is_clean(), "{:?}", &r.entries[..r.entries.len().min(5)]);
    // auditing against the pre-deletion table must fail
    assert!(!audit_forest(&f, &t).is_clean());
    assert!(matches!(f.delete(ids[0]), Err(UnlearnError::MissingSample(_))));
    assert!(matches!(f.delete(SampleId(99_999)), Err(UnlearnError::MissingSample(_))));
}

#[test]
fn greedy_nodes_stay_optimal_among_candidates() {
    let t = blobs(300, 5);
    let mut f = dare_train(&t, params(1), RngStream::from_seed(3)).unwrap();
    for id in t.ids()[..60].iter() {
        f.delete(*id).unwrap();
    }
    fn walk(node: &DareNode) {
        if let NodeKind::Greedy { attr, threshold, candidates, .. } = &node.kind {
            assert_eq!(best_split(candidates), Some((*attr, *threshold)));
        }
        if let Some((l, r)) = node.children() {
            walk(l);
            walk(r);
        }
    }
    for tree in &f.trees {
        walk(&tree.root);
    }
}

#[test]
fn corrupted_count_is_located() {
    let t = blobs(200, 6);
    let mut f = dare_train(&t, params(1), RngStream::from_seed(4)).unwrap();
    let (NodeKind::Random { left, .. } | NodeKind::Greedy { left, .. }) = &mut f.trees[1].root.kind else {
        panic!("root should split");
    };
    left.n_pos += 1;
    let r = audit_forest(&f, &t);
    assert_eq!(r.entries.len(), 1, "{:?}", r.entries);
    assert_eq!(r.entries[0].tree, 1);
    assert_eq!(r.entries[0].path, "rootL");
    assert_eq!(r.entries[0].field, "n_pos");
    assert!(r.to_csv().starts_with("tree,path,field,expected,found\n1,rootL,n_pos,"));
}

#[test]
fn unchanged_splits_only_touch_statistics() {
    let t = blobs(2000, 8);
    let p = DareParams { trees: 4, d_max: 5, d_rmax: 0, k: 5, p_tilde: 3 };
    let f = dare_train(&t, p, RngStream::from_seed(5)).unwrap();
    let mut seen_cheap = false;
    for &id in &t.ids()[..40] {
        let (g, cost) = dare_unlearn(&f, id).unwrap();
        if cost.nodes_retrained == 0 && cost.samples_gathered == 0 {
            seen_cheap = true;
            // best case: every cached statistic on the path, nothing more
            assert!(cost.stats_updated <= (p.trees * p.p_tilde * p.k * p.d_max) as u64);
            assert!(cost.nodes_visited <= (p.trees * (p.d_max + 1)) as u64);
            for (a, b) in f.trees.iter().zip(&g.trees) {
                assert!(same_structure(&a.root, &b.root));
            }
            assert!(audit_forest(&g, &g.alive_table()).is_clean());
        }
    }
    assert!(seen_cheap);
}

fn same_structure(a: &DareNode, b: &DareNode) -> bool {
    a.split() == b.split()
        && match (a.children(), b.children()) {
            (Some((al, ar)), Some((bl, br))) => same_structure(al, bl) && same_structure(ar, br),
            (None, None) => true,
            _ => false,
        }
}

#[test]
fn valid_thresholds_skip_pure_same_label_neighbours() {
    let rows: Vec<Vec<f64>> = [1.0, 1.0, 2.0, 3.0, 3.0, 4.0].iter().map(|&v| vec![v]).collect();
    let t = DatasetTable::from_rows(&rows, vec![0, 0, 0, 1, 0, 1], 2).unwrap();
    let groups = value_groups(&t, &[0, 1, 2, 3, 4, 5], 0);
    assert_eq!(groups, vec![(1.0, 2, 0), (2.0, 1, 0), (3.0, 2, 1), (4.0, 1, 1)]);
    let v: Vec<f64> = valid_thresholds(&groups).iter().map(|t| t.value).collect();
    assert_eq!(v, vec![2.5, 3.5]);
}

#[test]
fn forest_file_round_trip() {
    let t = blobs(150, 9);
    let mut f = dare_train(&t, params(2), RngStream::from_seed(6)).unwrap();
    f.delete(t.id(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ukf");
    f.write(&path).unwrap();
    let g = DareForest::read(&path).unwrap();
    assert_eq!(g, f);
    let bytes = f.to_bytes();
    assert_eq!(&bytes[..4], b"UKF1");
    assert!(DareForest::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn training_is_deterministic() {
    let t = blobs(200, 10);
    let a = dare_train(&t, params(2), RngStream::from_seed(1)).unwrap();
    let b = dare_train(&t, params(2), RngStream::from_seed(1)).unwrap();
    assert_eq!(a, b);
    assert!(dare_train(&DatasetTable::empty(3, 2), params(0), RngStream::from_seed(0)).is_err());
}
