//! Gradient-boosted regression trees with squared-error loss.
//!
//! Each round fits a depth-limited tree to the current residuals by exact
//! greedy variance-reduction splits. Candidate thresholds are the sorted
//! unique values of each feature; a row goes left when `x <= threshold`.
//! Ties in gain keep the lower feature index, then the lower threshold.
//!
//! Trees are grown level by level over columns presorted once per
//! [`FeatureMatrix`], so one level costs a single pass over every column.
//! A [`FeatureMatrix`] can be shared by several fits that differ only in
//! their targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub n_rounds: usize,
    /// Shrinkage in `[0, 1]`; zero leaves every prediction at the base score.
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub subsample_rows: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            n_rounds: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 5,
            subsample_rows: 1.0,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.learning_rate) {
            return Err(Error::invalid(format!(
                "learning_rate must lie in [0, 1], got {}",
                self.learning_rate
            )));
        }
        if !(self.subsample_rows > 0.0 && self.subsample_rows <= 1.0) {
            return Err(Error::invalid(format!(
                "subsample_rows must lie in (0, 1], got {}",
                self.subsample_rows
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::invalid("min_samples_leaf must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        BoostConfig { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn evaluate(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    fn evaluate_column_major(&self, data: &FeatureMatrix, r: usize) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if data.value(*feature, r) <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Visit every split as `(feature, threshold)`.
    pub fn for_each_split(&self, f: &mut impl FnMut(usize, f64)) {
        if let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = self
        {
            f(*feature, *threshold);
            left.for_each_split(f);
            right.for_each_split(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub format_version: u32,
    pub base_score: f64,
    pub n_features: usize,
    pub trees: Vec<Node>,
    pub config: BoostConfig,
}

impl TreeEnsemble {
    /// An ensemble with no trees: predicts `base_score` everywhere.
    pub fn constant(base_score: f64, n_features: usize, config: BoostConfig) -> Self {
        TreeEnsemble {
            format_version: FORMAT_VERSION,
            base_score,
            n_features,
            trees: Vec::new(),
            config,
        }
    }

    /// Prediction for one row; panics if the row is narrower than a split
    /// feature index. Use [`TreeEnsemble::predict`] for checked input.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.evaluate(row)).sum();
        self.base_score + self.config.learning_rate * sum
    }

    /// Predictions for `rows` (row-major, `n_features` per row).
    pub fn predict(&self, rows: &[f64]) -> Result<Vec<f64>> {
        if self.n_features == 0 {
            if !rows.is_empty() {
                return Err(Error::WidthMismatch {
                    expected: 0,
                    found: rows.len(),
                });
            }
            return Ok(Vec::new());
        }
        if !rows.len().is_multiple_of(self.n_features) {
            return Err(Error::WidthMismatch {
                expected: self.n_features,
                found: rows.len() % self.n_features,
            });
        }
        Ok(rows
            .chunks_exact(self.n_features)
            .map(|r| self.predict_row(r))
            .collect())
    }

    /// Copy keeping only the first `n` trees.
    pub fn truncated(&self, n: usize) -> Self {
        TreeEnsemble {
            trees: self.trees[..n.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: TreeEnsemble = serde_json::from_str(s)?;
        if e.format_version != FORMAT_VERSION {
            return Err(Error::Version(e.format_version));
        }
        Ok(e)
    }
}

/// Column-major feature storage with per-column sort orders.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_features: usize,
    columns: Vec<f64>,
    order: Vec<u32>,
    /// Column values laid out in sort order.
    sorted_values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_row_major(rows: &[f64], n_features: usize) -> Result<Self> {
        if n_features == 0 || !rows.len().is_multiple_of(n_features) {
            return Err(Error::invalid(format!(
                "{} cells do not form rows of width {n_features}",
                rows.len()
            )));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        let n_rows = rows.len() / n_features;
        if n_rows > u32::MAX as usize {
            return Err(Error::invalid("too many rows"));
        }
        let mut columns = vec![0.0; rows.len()];
        for (r, row) in rows.chunks_exact(n_features).enumerate() {
            for (f, &x) in row.iter().enumerate() {
                columns[f * n_rows + r] = x;
            }
        }
        let mut order = Vec::with_capacity(rows.len());
        let mut sorted_values = Vec::with_capacity(rows.len());
        for f in 0..n_features {
            let col = &columns[f * n_rows..(f + 1) * n_rows];
            let mut idx: Vec<u32> = (0..n_rows as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            sorted_values.extend(idx.iter().map(|&r| col[r as usize]));
            order.extend(idx);
        }
        Ok(FeatureMatrix {
            n_rows,
            n_features,
            columns,
            order,
            sorted_values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    fn value(&self, f: usize, r: usize) -> f64 {
        self.columns[f * self.n_rows + r]
    }

    fn sorted(&self, f: usize) -> (&[u32], &[f64]) {
        let range = f * self.n_rows..(f + 1) * self.n_rows;
        (&self.order[range.clone()], &self.sorted_values[range])
    }
}

/// Fit on row-major features.
pub fn fit(rows: &[f64], n_features: usize, targets: &[f64], config: &BoostConfig) -> Result<TreeEnsemble> {
    let data = FeatureMatrix::from_row_major(rows, n_features)?;
    fit_prepared(&data, targets, config)
}

/// Mean computed around the first value so constant input is reproduced exactly.
fn shifted_mean(values: &[f64]) -> f64 {
    let anchor = values[0];
    anchor + values.iter().map(|v| v - anchor).sum::<f64>() / values.len() as f64
}

pub fn fit_prepared(data: &FeatureMatrix, targets: &[f64], config: &BoostConfig) -> Result<TreeEnsemble> {
    config.validate()?;
    if targets.len() != data.n_rows {
        return Err(Error::invalid(format!(
            "{} targets for {} rows",
            targets.len(),
            data.n_rows
        )));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::NonFinite("targets"));
    }
    if data.n_rows < 2 * config.min_samples_leaf || data.n_rows == 0 {
        return Err(Error::invalid(format!(
            "{} rows is too few for min_samples_leaf = {}",
            data.n_rows, config.min_samples_leaf
        )));
    }

    let n = data.n_rows;
    let base_score = shifted_mean(targets);
    let mut fitted = vec![base_score; n];
    let mut residual = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_sample = ((config.subsample_rows * n as f64).ceil() as usize).clamp(1, n);
    let mut builder = TreeBuilder::new(data, config);
    let mut trees = Vec::with_capacity(config.n_rounds);

    for _ in 0..config.n_rounds {
        for ((r, y), f) in residual.iter_mut().zip(targets).zip(&fitted) {
            *r = y - f;
        }
        let rows: Option<Vec<usize>> = (n_sample < n)
            .then(|| rand::seq::index::sample(&mut rng, n, n_sample).into_vec());
        let tree = builder.build(&residual, rows.as_deref());
        for (r, f) in fitted.iter_mut().enumerate() {
            *f += config.learning_rate * tree.evaluate_column_major(data, r);
        }
        trees.push(tree);
    }

    Ok(TreeEnsemble {
        format_version: FORMAT_VERSION,
        base_score,
        n_features: data.n_features,
        trees,
        config: *config,
    })
}

const INACTIVE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

enum Slot {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A frontier node: its rows sit at `offset..offset + count` inside every
/// feature's segment of the partitioned sort orders.
#[derive(Debug, Clone, Copy)]
struct Frontier {
    arena: usize,
    offset: usize,
    count: usize,
    sum: f64,
}

/// Level-wise exact tree growth. Each feature's sort order is kept
/// partitioned by node, so every node scans a contiguous sorted range.
struct TreeBuilder<'a> {
    data: &'a FeatureMatrix,
    max_depth: usize,
    min_leaf: usize,
    /// `1 / n` for every possible node size.
    recip: Vec<f64>,
    order: Vec<u32>,
    values: Vec<f64>,
    order_next: Vec<u32>,
    values_next: Vec<f64>,
    /// Child frontier index of each row, or `INACTIVE`.
    child_of: Vec<u32>,
}

impl<'a> TreeBuilder<'a> {
    fn new(data: &'a FeatureMatrix, config: &BoostConfig) -> Self {
        TreeBuilder {
            data,
            max_depth: config.max_depth,
            min_leaf: config.min_samples_leaf,
            recip: (0..=data.n_rows)
                .map(|n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
                .collect(),
            order: Vec::new(),
            values: Vec::new(),
            order_next: Vec::new(),
            values_next: Vec::new(),
            child_of: vec![INACTIVE; data.n_rows],
        }
    }

    /// Best split of one sorted range; candidates lie between distinct
    /// consecutive values with at least `min_leaf` rows on each side.
    #[allow(clippy::too_many_arguments)]
    fn scan(
        &self,
        f: usize,
        order: &[u32],
        values: &[f64],
        residual: &[f64],
        total: f64,
        parent: f64,
        best: &mut Option<Candidate>,
    ) {
        let n = order.len();
        let k = self.min_leaf;
        if n < 2 * k || values[0] == values[n - 1] {
            return;
        }
        let mut left: f64 = order[..k - 1].iter().map(|&r| residual[r as usize]).sum();
        let mut best_gain = best.map_or(f64::NEG_INFINITY, |b| b.gain);
        let mut best_at = None;
        let recip_left = &self.recip[k..=n - k];
        let recip_right = &self.recip[k..=n - k];
        let steps = order[k - 1..n - k]
            .iter()
            .zip(&values[k - 1..n - k])
            .zip(&values[k..=n - k]);
        for (i, ((&r, &v), &next)) in steps.enumerate() {
            left += residual[r as usize];
            if next != v {
                let right = total - left;
                let gain = left * left * recip_left[i] + right * right * recip_right[n - 2 * k - i] - parent;
                if gain > best_gain {
                    best_gain = gain;
                    best_at = Some(v);
                }
            }
        }
        if let Some(threshold) = best_at {
            *best = Some(Candidate {
                gain: best_gain,
                feature: f,
                threshold,
            });
        }
    }

    fn build(&mut self, residual: &[f64], rows: Option<&[usize]>) -> Node {
        let data = self.data;
        let n_features = data.n_features;
        // Root level reads the shared sort orders directly.
        let mut shared = true;
        let mut m = data.n_rows;
        if let Some(rows) = rows {
            let mut active = vec![false; data.n_rows];
            rows.iter().for_each(|&r| active[r] = true);
            m = rows.len();
            self.order.clear();
            self.values.clear();
            for f in 0..n_features {
                let (order, values) = data.sorted(f);
                for (&r, &v) in order.iter().zip(values) {
                    if active[r as usize] {
                        self.order.push(r);
                        self.values.push(v);
                    }
                }
            }
            shared = false;
        }
        let root_sum = {
            let order = if shared { &data.order[..m] } else { &self.order[..m] };
            order.iter().map(|&r| residual[r as usize]).sum()
        };
        let mut arena: Vec<Option<Slot>> = vec![None];
        let mut frontier = vec![Frontier {
            arena: 0,
            offset: 0,
            count: m,
            sum: root_sum,
        }];

        for depth in 0..self.max_depth {
            let (order, values) = if shared {
                (&data.order[..], &data.sorted_values[..])
            } else {
                (&self.order[..], &self.values[..])
            };
            let mut best: Vec<Option<Candidate>> = vec![None; frontier.len()];
            for f in 0..n_features {
                let seg = f * m;
                for (node, b) in frontier.iter().zip(best.iter_mut()) {
                    let range = seg + node.offset..seg + node.offset + node.count;
                    let parent = node.sum * node.sum * self.recip[node.count];
                    self.scan(f, &order[range.clone()], &values[range], residual, node.sum, parent, b);
                }
            }

            // Route rows of splitting nodes to their children.
            let mut next: Vec<Frontier> = Vec::new();
            let mut offset = 0;
            for (node, b) in frontier.iter().zip(&best) {
                let rows = &order[node.offset..node.offset + node.count];
                match b {
                    Some(c) if c.gain > 0.0 => {
                        let (left, right) = (arena.len(), arena.len() + 1);
                        arena.push(None);
                        arena.push(None);
                        arena[node.arena] = Some(Slot::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right,
                        });
                        let (li, ri) = (next.len() as u32, next.len() as u32 + 1);
                        let mut kids = [
                            Frontier { arena: left, offset: 0, count: 0, sum: 0.0 },
                            Frontier { arena: right, offset: 0, count: 0, sum: 0.0 },
                        ];
                        for &r in rows {
                            let go_left = data.value(c.feature, r as usize) <= c.threshold;
                            let k = usize::from(!go_left);
                            self.child_of[r as usize] = if go_left { li } else { ri };
                            kids[k].count += 1;
                            kids[k].sum += residual[r as usize];
                        }
                        for kid in &mut kids {
                            kid.offset = offset;
                            offset += kid.count;
                        }
                        next.extend(kids);
                    }
                    _ => {
                        arena[node.arena] = Some(Slot::Leaf(node.sum * self.recip[node.count]));
                        for &r in rows {
                            self.child_of[r as usize] = INACTIVE;
                        }
                    }
                }
            }
            frontier = next;
            if frontier.is_empty() || depth + 1 == self.max_depth {
                break;
            }

            // Stable partition of every feature segment into child ranges.
            let m_next = offset;
            let needed = n_features * m_next;
            if self.order_next.len() < needed {
                self.order_next.resize(needed, 0);
                self.values_next.resize(needed, 0.0);
            }
            let mut cursor: Vec<usize> = Vec::with_capacity(frontier.len());
            for f in 0..n_features {
                cursor.clear();
                cursor.extend(frontier.iter().map(|k| f * m_next + k.offset));
                let src = f * m..(f + 1) * m;
                for (&r, &v) in order[src.clone()].iter().zip(&values[src]) {
                    let child = self.child_of[r as usize];
                    if child != INACTIVE {
                        let c = &mut cursor[child as usize];
                        self.order_next[*c] = r;
                        self.values_next[*c] = v;
                        *c += 1;
                    }
                }
            }
            std::mem::swap(&mut self.order, &mut self.order_next);
            std::mem::swap(&mut self.values, &mut self.values_next);
            shared = false;
            m = m_next;
        }
        for node in &frontier {
            arena[node.arena] = Some(Slot::Leaf(node.sum * self.recip[node.count]));
        }
        assemble(&mut arena, 0)
    }
}

fn assemble(arena: &mut [Option<Slot>], i: usize) -> Node {
    match arena[i].take().expect("every arena node is finalized") {
        Slot::Leaf(value) => Node::Leaf { value },
        Slot::Split {
            feature,
            threshold,
            left,
            right,
        } => Node::Split {
            feature,
            threshold,
            left: Box::new(assemble(arena, left)),
            right: Box::new(assemble(arena, right)),
        },
    }
}
