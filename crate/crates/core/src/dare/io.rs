//! Versioned binary forest format: magic `UKF1`, hyperparameters, the
//! training table with its alive flags, then each tree in preorder.

use std::path::Path;
use std::sync::Arc;

use crate::codec::{Decoder, Encoder};
use crate::data::{DatasetTable, SampleId};
use crate::error::{Result, UnlearnError};
use crate::rng::RngStream;

use super::node::{AttributeCandidates, DareNode, NodeKind, ThresholdStats};
use super::{DareForest, DareParams, DareTree};

const MAGIC: &[u8; 4] = b"UKF1";

fn put_node(e: &mut Encoder, node: &DareNode) {
    let tag = match node.kind {
        NodeKind::Leaf { .. } => 0,
        NodeKind::Random { .. } => 1,
        NodeKind::Greedy { .. } => 2,
    };
    e.u64(tag);
    e.usize(node.depth);
    e.u64(node.n as u64);
    e.u64(node.n_pos as u64);
    match &node.kind {
        NodeKind::Leaf { members } => {
            e.usize(members.len());
            for &m in members {
                e.u64(m as u64);
            }
        }
        NodeKind::Random { attr, threshold, a_min, a_max, left, right } => {
            e.usize(*attr);
            e.f64(*threshold);
            e.f64(*a_min);
            e.f64(*a_max);
            put_node(e, left);
            put_node(e, right);
        }
        NodeKind::Greedy { attr, threshold, candidates, left, right } => {
            e.usize(*attr);
            e.f64(*threshold);
            e.usize(candidates.len());
            for c in candidates {
                e.usize(c.attr);
                e.usize(c.thresholds.len());
                for t in &c.thresholds {
                    e.f64(t.value);
                    for v in [t.left_n, t.left_pos, t.right_n, t.right_pos] {
                        e.u64(v as u64);
                    }
                    e.f64(t.lower);
                    e.u64(t.lower_n as u64);
                    e.u64(t.lower_pos as u64);
                    e.f64(t.upper);
                    e.u64(t.upper_n as u64);
                    e.u64(t.upper_pos as u64);
                }
            }
            put_node(e, left);
            put_node(e, right);
        }
    }
}

fn u32_of(d: &mut Decoder<'_>) -> Result<u32> {
    u32::try_from(d.u64()?).map_err(|_| UnlearnError::Format("count exceeds u32".into()))
}

fn get_node(d: &mut Decoder<'_>, depth_limit: usize) -> Result<DareNode> {
    let tag = d.u64()?;
    let depth = d.usize()?;
    if depth > depth_limit {
        return Err(UnlearnError::Format(format!("node depth {depth} exceeds d_max")));
    }
    let n = u32_of(d)?;
    let n_pos = u32_of(d)?;
    let kind = match tag {
        0 => {
            let len = d.len(8)?;
            let members = (0..len).map(|_| u32_of(d)).collect::<Result<_>>()?;
            NodeKind::Leaf { members }
        }
        1 => {
            let attr = d.usize()?;
            let threshold = d.f64()?;
            let a_min = d.f64()?;
            let a_max = d.f64()?;
            let left = Box::new(get_node(d, depth_limit)?);
            let right = Box::new(get_node(d, depth_limit)?);
            NodeKind::Random { attr, threshold, a_min, a_max, left, right }
        }
        2 => {
            let attr = d.usize()?;
            let threshold = d.f64()?;
            let count = d.len(16)?;
            let mut candidates = Vec::with_capacity(count);
            for _ in 0..count {
                let a = d.usize()?;
                let len = d.len(88)?;
                let mut thresholds = Vec::with_capacity(len);
                for _ in 0..len {
                    thresholds.push(ThresholdStats {
                        value: d.f64()?,
                        left_n: u32_of(d)?,
                        left_pos: u32_of(d)?,
                        right_n: u32_of(d)?,
                        right_pos: u32_of(d)?,
                        lower: d.f64()?,
                        lower_n: u32_of(d)?,
                        lower_pos: u32_of(d)?,
                        upper: d.f64()?,
                        upper_n: u32_of(d)?,
                        upper_pos: u32_of(d)?,
                    });
                }
                candidates.push(AttributeCandidates { attr: a, thresholds });
            }
            let left = Box::new(get_node(d, depth_limit)?);
            let right = Box::new(get_node(d, depth_limit)?);
            NodeKind::Greedy { attr, threshold, candidates, left, right }
        }
        t => return Err(UnlearnError::Format(format!("unknown node tag {t}"))),
    };
    Ok(DareNode { depth, n, n_pos, kind })
}

fn check_node(node: &DareNode, n: usize, p: usize) -> Result<()> {
    let bad = |what: &str| Err(UnlearnError::Format(format!("{what} out of range")));
    match &node.kind {
        NodeKind::Leaf { members } => {
            if members.iter().any(|&m| m as usize >= n) {
                return bad("leaf member");
            }
            Ok(())
        }
        NodeKind::Random { attr, left, right, .. } | NodeKind::Greedy { attr, left, right, .. } => {
            if *attr >= p {
                return bad("split attribute");
            }
            if let NodeKind::Greedy { candidates, .. } = &node.kind {
                if candidates.iter().any(|c| c.attr >= p) {
                    return bad("candidate attribute");
                }
            }
            check_node(left, n, p)?;
            check_node(right, n, p)
        }
    }
}

impl DareForest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_magic(MAGIC);
        let p = &self.params;
        for v in [p.trees, p.d_max, p.d_rmax, p.k, p.p_tilde] {
            e.usize(v);
        }
        let data = self.data();
        e.usize(data.n());
        e.usize(data.p());
        e.u64(data.class_count() as u64);
        e.f64s(data.features());
        for &y in data.labels() {
            e.u64(y as u64);
        }
        for id in data.ids() {
            e.u64(id.0);
        }
        for &a in self.alive_flags() {
            e.u64(a as u64);
        }
        for tree in &self.trees {
            e.u64(tree.rng.seed);
            e.u64(tree.rng.stream_id);
            e.u64(tree.ops);
            put_node(&mut e, &tree.root);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC)?;
        let params = DareParams {
            trees: d.len(24)?,
            d_max: d.usize()?,
            d_rmax: d.usize()?,
            k: d.usize()?,
            p_tilde: d.usize()?,
        };
        let n = d.len(32)?;
        let p = d.len(8)?;
        if n.checked_mul(p).is_none() {
            return Err(UnlearnError::Format("table size overflows".into()));
        }
        let class_count =
            u32::try_from(d.u64()?).map_err(|_| UnlearnError::Format("class count exceeds u32".into()))?;
        let features = d.f64s(n * p)?;
        let labels = (0..n).map(|_| u32_of(&mut d)).collect::<Result<Vec<_>>>()?;
        let ids = (0..n).map(|_| d.u64().map(SampleId)).collect::<Result<Vec<_>>>()?;
        let alive = (0..n).map(|_| d.u64().map(|v| v != 0)).collect::<Result<Vec<_>>>()?;
        let data = DatasetTable::new(p, features, labels, ids, class_count)
            .map_err(|e| UnlearnError::Format(e.to_string()))?;
        let mut trees = Vec::with_capacity(params.trees);
        for _ in 0..params.trees {
            let rng = RngStream::new(d.u64()?, d.u64()?);
            let ops = d.u64()?;
            let root = get_node(&mut d, params.d_max)?;
            check_node(&root, n, p)?;
            trees.push(DareTree { root, rng, ops });
        }
        d.finish()?;
        Ok(DareForest { params, trees, data: Arc::new(data), alive })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
