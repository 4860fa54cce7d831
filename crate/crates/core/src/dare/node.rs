use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::data::DatasetTable;
use crate::rng::RngStream;

use super::{DareCost, DareParams};

/// Statistics of one candidate threshold. `lower`/`upper` are the adjacent
/// distinct attribute values the threshold sits between, with the size and
/// positive count of each value group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdStats {
    pub value: f64,
    pub left_n: u32,
    pub left_pos: u32,
    pub right_n: u32,
    pub right_pos: u32,
    pub lower: f64,
    pub lower_n: u32,
    pub lower_pos: u32,
    pub upper: f64,
    pub upper_n: u32,
    pub upper_pos: u32,
}

fn pure_label(n: u32, pos: u32) -> Option<u32> {
    if pos == 0 {
        Some(0)
    } else if pos == n {
        Some(1)
    } else {
        None
    }
}

fn gini(n: u32, pos: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let q = pos as f64 / n as f64;
    2.0 * q * (1.0 - q)
}

impl ThresholdStats {
    /// Both neighbouring value groups are present and they are not pure with
    /// the same label.
    pub fn is_valid(&self) -> bool {
        if self.lower_n == 0 || self.upper_n == 0 {
            return false;
        }
        match (pure_label(self.lower_n, self.lower_pos), pure_label(self.upper_n, self.upper_pos)) {
            (Some(a), Some(b)) => a != b,
            _ => true,
        }
    }

    /// Size-weighted Gini impurity of the two children (lower is better).
    pub fn weighted_gini(&self) -> f64 {
        let n = (self.left_n + self.right_n) as f64;
        (self.left_n as f64 * gini(self.left_n, self.left_pos)
            + self.right_n as f64 * gini(self.right_n, self.right_pos))
            / n
    }

    fn remove(&mut self, x: f64, y: u32) {
        if x <= self.value {
            self.left_n -= 1;
            self.left_pos -= y;
        } else {
            self.right_n -= 1;
            self.right_pos -= y;
        }
        if x == self.lower {
            self.lower_n -= 1;
            self.lower_pos -= y;
        } else if x == self.upper {
            self.upper_n -= 1;
            self.upper_pos -= y;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeCandidates {
    pub attr: usize,
    /// Sorted by threshold value.
    pub thresholds: Vec<ThresholdStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Leaf {
        /// Table positions of the samples that reach this leaf.
        members: Vec<u32>,
    },
    Random {
        attr: usize,
        threshold: f64,
        a_min: f64,
        a_max: f64,
        left: Box<DareNode>,
        right: Box<DareNode>,
    },
    Greedy {
        attr: usize,
        threshold: f64,
        candidates: Vec<AttributeCandidates>,
        left: Box<DareNode>,
        right: Box<DareNode>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DareNode {
    pub depth: usize,
    pub n: u32,
    pub n_pos: u32,
    pub kind: NodeKind,
}

impl DareNode {
    /// Positive fraction; an empty leaf predicts 0.5.
    pub fn value(&self) -> f64 {
        if self.n == 0 {
            0.5
        } else {
            self.n_pos as f64 / self.n as f64
        }
    }

    pub fn is_pure(&self) -> bool {
        self.n_pos == 0 || self.n_pos == self.n
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match &node.kind {
                NodeKind::Leaf { .. } => return node.value(),
                NodeKind::Random { attr, threshold, left, right, .. }
                | NodeKind::Greedy { attr, threshold, left, right, .. } => {
                    node = if x[*attr] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn children(&self) -> Option<(&DareNode, &DareNode)> {
        match &self.kind {
            NodeKind::Leaf { .. } => None,
            NodeKind::Random { left, right, .. } | NodeKind::Greedy { left, right, .. } => {
                Some((left, right))
            }
        }
    }

    pub fn split(&self) -> Option<(usize, f64)> {
        match &self.kind {
            NodeKind::Leaf { .. } => None,
            NodeKind::Random { attr, threshold, .. } | NodeKind::Greedy { attr, threshold, .. } => {
                Some((*attr, *threshold))
            }
        }
    }

    pub(crate) fn total_samples(&self) -> u64 {
        self.n as u64 + self.children().map_or(0, |(l, r)| l.total_samples() + r.total_samples())
    }

    pub(crate) fn node_count(&self) -> usize {
        1 + self.children().map_or(0, |(l, r)| l.node_count() + r.node_count())
    }

    pub(crate) fn random_node_count(&self) -> usize {
        let own = usize::from(matches!(self.kind, NodeKind::Random { .. }));
        own + self.children().map_or(0, |(l, r)| l.random_node_count() + r.random_node_count())
    }

    fn collect_members(&self, alive: &[bool], out: &mut Vec<u32>) {
        match &self.kind {
            NodeKind::Leaf { members } => {
                out.extend(members.iter().copied().filter(|&i| alive[i as usize]));
            }
            _ => {
                let (l, r) = self.children().expect("split node");
                l.collect_members(alive, out);
                r.collect_members(alive, out);
            }
        }
    }
}

/// Distinct values of `attr` among `positions`, ascending, with group size
/// and positive count.
pub(crate) fn value_groups(data: &DatasetTable, positions: &[u32], attr: usize) -> Vec<(f64, u32, u32)> {
    let mut pairs: Vec<(f64, u32)> =
        positions.iter().map(|&i| (data.feature(i as usize, attr), data.label(i as usize))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, u32, u32)> = Vec::new();
    for (x, y) in pairs {
        match groups.last_mut() {
            Some(g) if g.0 == x => {
                g.1 += 1;
                g.2 += y;
            }
            _ => groups.push((x, 1, y)),
        }
    }
    groups
}

/// Every valid threshold of an attribute, ascending.
pub(crate) fn valid_thresholds(groups: &[(f64, u32, u32)]) -> Vec<ThresholdStats> {
    let total_n: u32 = groups.iter().map(|g| g.1).sum();
    let total_pos: u32 = groups.iter().map(|g| g.2).sum();
    let mut out = Vec::new();
    let (mut left_n, mut left_pos) = (0, 0);
    for w in groups.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        left_n += lo.1;
        left_pos += lo.2;
        let t = ThresholdStats {
            value: lo.0 + (hi.0 - lo.0) / 2.0,
            left_n,
            left_pos,
            right_n: total_n - left_n,
            right_pos: total_pos - left_pos,
            lower: lo.0,
            lower_n: lo.1,
            lower_pos: lo.2,
            upper: hi.0,
            upper_n: hi.1,
            upper_pos: hi.2,
        };
        if t.is_valid() {
            out.push(t);
        }
    }
    out
}

/// Best `(attr, threshold)` by weighted Gini; ties go to the smaller
/// attribute, then the smaller threshold.
pub(crate) fn best_split(candidates: &[AttributeCandidates]) -> Option<(usize, f64)> {
    let mut best: Option<(f64, usize, f64)> = None;
    for c in candidates {
        for t in &c.thresholds {
            let score = t.weighted_gini();
            let better = match best {
                None => true,
                Some((s, a, v)) => {
                    score < s || (score == s && (c.attr, t.value).partial_cmp(&(a, v)) == Some(std::cmp::Ordering::Less))
                }
            };
            if better {
                best = Some((score, c.attr, t.value));
            }
        }
    }
    best.map(|(_, a, v)| (a, v))
}

fn sample_thresholds<R: Rng>(rng: &mut R, valid: Vec<ThresholdStats>, k: usize) -> Vec<ThresholdStats> {
    let take = k.min(valid.len());
    let mut picked: Vec<usize> = index::sample(rng, valid.len(), take).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| valid[i]).collect()
}

fn range(data: &DatasetTable, positions: &[u32], attr: usize) -> (f64, f64) {
    positions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        let x = data.feature(i as usize, attr);
        (lo.min(x), hi.max(x))
    })
}

pub(crate) struct Builder<'a> {
    data: &'a DatasetTable,
    params: &'a DareParams,
    stream: RngStream,
    pub ops: u64,
    pub samples: u64,
    pub nodes: u64,
}

impl<'a> Builder<'a> {
    pub fn new(data: &'a DatasetTable, params: &'a DareParams, stream: RngStream, ops: u64) -> Self {
        Self { data, params, stream, ops, samples: 0, nodes: 0 }
    }

    fn next_rng(&mut self) -> rand_chacha::ChaCha8Rng {
        let r = self.stream.derive(self.ops).rng();
        self.ops += 1;
        r
    }

    fn leaf(depth: usize, n: u32, n_pos: u32, members: Vec<u32>) -> DareNode {
        DareNode { depth, n, n_pos, kind: NodeKind::Leaf { members } }
    }

    /// Samples up to `p̃` attributes (in random order, skipping those without
    /// valid thresholds) and up to `k` valid thresholds for each.
    pub fn sample_candidates<R: Rng>(
        &self,
        rng: &mut R,
        positions: &[u32],
        exclude: &[usize],
        wanted: usize,
    ) -> Vec<AttributeCandidates> {
        let mut attrs: Vec<usize> = (0..self.data.p()).filter(|a| !exclude.contains(a)).collect();
        attrs.shuffle(rng);
        let mut out = Vec::new();
        for a in attrs {
            if out.len() == wanted {
                break;
            }
            let valid = valid_thresholds(&value_groups(self.data, positions, a));
            if valid.is_empty() {
                continue;
            }
            out.push(AttributeCandidates { attr: a, thresholds: sample_thresholds(rng, valid, self.params.k) });
        }
        out
    }

    pub fn build(&mut self, mut positions: Vec<u32>, depth: usize) -> DareNode {
        positions.sort_unstable();
        self.samples += positions.len() as u64;
        self.nodes += 1;
        let n = positions.len() as u32;
        let n_pos: u32 = positions.iter().map(|&i| self.data.label(i as usize)).sum();
        if n == 0 || n_pos == 0 || n_pos == n || depth >= self.params.d_max {
            return Self::leaf(depth, n, n_pos, positions);
        }
        let mut rng = self.next_rng();
        if depth < self.params.d_rmax {
            let ranges: Vec<(usize, f64, f64)> = (0..self.data.p())
                .map(|a| {
                    let (lo, hi) = range(self.data, &positions, a);
                    (a, lo, hi)
                })
                .filter(|&(_, lo, hi)| lo < hi)
                .collect();
            if ranges.is_empty() {
                return Self::leaf(depth, n, n_pos, positions);
            }
            let (attr, a_min, a_max) = ranges[rng.random_range(0..ranges.len())];
            let threshold = rng.random_range(a_min..a_max);
            let (l, r) = self.partition(&positions, attr, threshold);
            let left = Box::new(self.build(l, depth + 1));
            let right = Box::new(self.build(r, depth + 1));
            return DareNode { depth, n, n_pos, kind: NodeKind::Random { attr, threshold, a_min, a_max, left, right } };
        }
        let mut candidates = self.sample_candidates(&mut rng, &positions, &[], self.params.p_tilde);
        candidates.sort_by_key(|c| c.attr);
        let Some((attr, threshold)) = best_split(&candidates) else {
            return Self::leaf(depth, n, n_pos, positions);
        };
        let (l, r) = self.partition(&positions, attr, threshold);
        let left = Box::new(self.build(l, depth + 1));
        let right = Box::new(self.build(r, depth + 1));
        DareNode { depth, n, n_pos, kind: NodeKind::Greedy { attr, threshold, candidates, left, right } }
    }

    fn partition(&self, positions: &[u32], attr: usize, threshold: f64) -> (Vec<u32>, Vec<u32>) {
        positions.iter().partition(|&&i| self.data.feature(i as usize, attr) <= threshold)
    }
}

enum Refresh {
    Nothing,
    Range(usize),
    Candidates,
}

pub(crate) struct DeleteCtx<'a> {
    builder: Builder<'a>,
    alive: &'a [bool],
    pub ops: u64,
    pub cost: DareCost,
}

impl<'a> DeleteCtx<'a> {
    pub fn new(
        data: &'a DatasetTable,
        alive: &'a [bool],
        params: &'a DareParams,
        stream: RngStream,
        ops: u64,
    ) -> Self {
        Self { builder: Builder::new(data, params, stream, ops), alive, ops, cost: DareCost::default() }
    }

    fn gather(&mut self, node: &DareNode) -> Vec<u32> {
        let mut out = Vec::with_capacity(node.n as usize);
        node.collect_members(self.alive, &mut out);
        out.sort_unstable();
        self.cost.samples_gathered += out.len() as u64;
        out
    }

    fn rebuild(&mut self, node: &mut DareNode) {
        let members = self.gather(node);
        self.builder.ops = self.ops;
        self.builder.samples = 0;
        self.builder.nodes = 0;
        *node = self.builder.build(members, node.depth);
        self.ops = self.builder.ops;
        self.cost.samples_retrained += self.builder.samples;
        self.cost.nodes_retrained += self.builder.nodes;
    }

    /// Removes the (already marked dead) sample at `pos` from the subtree.
    pub fn delete(&mut self, node: &mut DareNode, pos: u32) {
        let data = self.builder.data;
        let x = data.row(pos as usize);
        let y = data.label(pos as usize);
        self.cost.nodes_visited += 1;
        node.n -= 1;
        node.n_pos -= y;
        if !matches!(node.kind, NodeKind::Leaf { .. }) && node.is_pure() {
            self.rebuild(node);
            return;
        }
        let refresh = match &mut node.kind {
            NodeKind::Leaf { members } => {
                members.retain(|&m| m != pos);
                return;
            }
            NodeKind::Random { attr, a_min, a_max, .. } => {
                if x[*attr] == *a_min || x[*attr] == *a_max {
                    Refresh::Range(*attr)
                } else {
                    Refresh::Nothing
                }
            }
            NodeKind::Greedy { candidates, .. } => {
                let mut invalid = false;
                for c in candidates.iter_mut() {
                    for t in &mut c.thresholds {
                        t.remove(x[c.attr], y);
                        self.cost.stats_updated += 1;
                        invalid |= !t.is_valid();
                    }
                }
                if invalid {
                    Refresh::Candidates
                } else {
                    Refresh::Nothing
                }
            }
        };
        match refresh {
            Refresh::Range(a) => {
                let gathered = self.gather(node);
                let (lo, hi) = range(data, &gathered, a);
                if let NodeKind::Random { a_min, a_max, .. } = &mut node.kind {
                    *a_min = lo;
                    *a_max = hi;
                }
            }
            Refresh::Candidates => {
                let gathered = self.gather(node);
                self.refresh_candidates(node, &gathered);
            }
            Refresh::Nothing => {}
        }
        let descend = match &node.kind {
            NodeKind::Random { threshold, a_min, a_max, .. } => *a_min <= *threshold && *threshold < *a_max,
            NodeKind::Greedy { attr, threshold, candidates, .. } => {
                best_split(candidates) == Some((*attr, *threshold))
            }
            NodeKind::Leaf { .. } => unreachable!("leaves return early"),
        };
        if !descend {
            self.rebuild(node);
            return;
        }
        match &mut node.kind {
            NodeKind::Random { attr, threshold, left, right, .. }
            | NodeKind::Greedy { attr, threshold, left, right, .. } => {
                let child = if x[*attr] <= *threshold { left } else { right };
                self.delete(child, pos);
            }
            NodeKind::Leaf { .. } => unreachable!(),
        }
    }

    /// Drops invalid thresholds, tops each attribute back up to `k` from its
    /// current valid thresholds, and replaces attributes left without any.
    fn refresh_candidates(&mut self, node: &mut DareNode, members: &[u32]) {
        let NodeKind::Greedy { candidates, .. } = &mut node.kind else {
            return;
        };
        let data = self.builder.data;
        let k = self.builder.params.k;
        let mut rng = self.builder.stream.derive(self.ops).rng();
        self.ops += 1;
        let mut kept = Vec::with_capacity(candidates.len());
        for mut c in std::mem::take(candidates) {
            if c.thresholds.iter().all(ThresholdStats::is_valid) {
                kept.push(c);
                continue;
            }
            c.thresholds.retain(ThresholdStats::is_valid);
            let fresh: Vec<ThresholdStats> = valid_thresholds(&value_groups(data, members, c.attr))
                .into_iter()
                .filter(|t| !c.thresholds.iter().any(|s| s.value == t.value))
                .collect();
            let need = k.saturating_sub(c.thresholds.len());
            c.thresholds.extend(sample_thresholds(&mut rng, fresh, need));
            c.thresholds.sort_by(|a, b| a.value.total_cmp(&b.value));
            if !c.thresholds.is_empty() {
                kept.push(c);
            }
        }
        let wanted = self.builder.params.p_tilde.saturating_sub(kept.len());
        if wanted > 0 {
            let used: Vec<usize> = kept.iter().map(|c| c.attr).collect();
            let extra = self.builder.sample_candidates(&mut rng, members, &used, wanted);
            kept.extend(extra);
        }
        kept.sort_by_key(|c| c.attr);
        *candidates = kept;
    }
}
