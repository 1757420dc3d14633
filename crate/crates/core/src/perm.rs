//! Permutation test for loss invariance along one covariate.
//!
//! The statistic is the largest absolute difference in mean loss over every
//! admissible binary split of the node. Its reference distribution is built by
//! shuffling the node's losses over the covariate positions and repeating the
//! whole split search, so the search itself is calibrated (max-T).

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{AuditDataset, CovariateColumn, GroupStats, IssueClass, Scale};
use crate::seed;
use crate::split::{category_set_rule, ordered_cut_rule, BlockLayout, SplitRule, TestError};

pub const DEFAULT_PERMUTATIONS: usize = 5000;

/// Ratio one delta must reach over the other for a single-cause verdict.
const DOMINANCE_RATIO: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidate {
    pub covariate: String,
    pub rule: SplitRule,
    /// Absolute difference of the two groups' mean losses.
    pub statistic: f64,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestOutcome {
    pub covariate: String,
    pub rule: SplitRule,
    pub statistic: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub exceed_count: usize,
    pub classification: IssueClass,
    pub left_stats: GroupStats,
    pub right_stats: GroupStats,
    #[serde(skip)]
    pub left: Vec<usize>,
    #[serde(skip)]
    pub right: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermConfig {
    pub n_permutations: usize,
    /// Smallest group a candidate split may leave on either side.
    pub min_leaf: usize,
}

impl Default for PermConfig {
    fn default() -> Self {
        Self {
            n_permutations: DEFAULT_PERMUTATIONS,
            min_leaf: 1,
        }
    }
}

/// All admissible splits of `node` along `column`, scored on `losses`
/// (indexed by dataset row).
///
/// Ordered columns get one candidate per gap between consecutive distinct
/// values. Nominal columns are ordered by mean loss and cut along that order,
/// giving `k - 1` candidates for `k` categories.
pub fn enumerate_splits(
    column: &CovariateColumn,
    losses: &[f64],
    node: &[usize],
) -> Result<Vec<SplitCandidate>, TestError> {
    enumerate_splits_with_min_leaf(column, losses, node, 1)
}

pub fn enumerate_splits_with_min_leaf(
    column: &CovariateColumn,
    losses: &[f64],
    node: &[usize],
    min_leaf: usize,
) -> Result<Vec<SplitCandidate>, TestError> {
    let layout = BlockLayout::new(column, node);
    let values: Vec<f64> = layout.rows.iter().map(|&r| losses[r]).collect();
    let scorer = Scorer::new(&layout, column.scale(), min_leaf);
    let order = scorer.block_order(&values);
    let cuts = scorer.cuts(&values, &order);
    if cuts.is_empty() {
        return Err(TestError::DegenerateColumn(column.name().to_string()));
    }

    Ok(cuts
        .into_iter()
        .map(|(k, statistic)| {
            let rule = match column.scale() {
                Scale::Nominal => {
                    category_set_rule(column, order[..=k].iter().map(|&b| layout.codes[b]).collect())
                }
                _ => ordered_cut_rule(column, &layout, k),
            };
            let (left, right) = rule.partition(column, node);
            SplitCandidate {
                covariate: column.name().to_string(),
                rule,
                statistic,
                left,
                right,
            }
        })
        .collect())
}

/// Max-T permutation test of `column` at `node`.
pub fn perm_test_covariate(
    dataset: &AuditDataset,
    column: &CovariateColumn,
    node: &[usize],
    config: &PermConfig,
    seed: u64,
) -> Result<PermTestOutcome, TestError> {
    if config.n_permutations == 0 {
        return Err(TestError::InvalidConfig("n_permutations must be >= 1".into()));
    }
    let losses = dataset.losses();
    let candidates = enumerate_splits_with_min_leaf(column, losses, node, config.min_leaf)?;
    // First maximum wins, so ties resolve to the lowest cut.
    let best = candidates
        .iter()
        .enumerate()
        .fold(0, |b, (i, c)| if c.statistic > candidates[b].statistic { i } else { b });
    let best = candidates[best].clone();

    let left_stats = dataset.group_stats(&best.left).expect("non-empty split side");
    let right_stats = dataset.group_stats(&best.right).expect("non-empty split side");
    let outcome = |p_value, exceed_count, classification| PermTestOutcome {
        covariate: best.covariate.clone(),
        rule: best.rule.clone(),
        statistic: best.statistic,
        p_value,
        n_permutations: config.n_permutations,
        exceed_count,
        classification,
        left_stats,
        right_stats,
        left: best.left.clone(),
        right: best.right.clone(),
    };

    let first = losses[node[0]];
    if node.iter().all(|&r| losses[r] == first) {
        return Ok(outcome(1.0, config.n_permutations, IssueClass::None));
    }

    let layout = BlockLayout::new(column, node);
    let scorer = Scorer::new(&layout, column.scale(), config.min_leaf);
    let mut values: Vec<f64> = layout.rows.iter().map(|&r| losses[r]).collect();
    let observed = best.statistic;
    let threshold = observed - 1e-12 * observed.abs();
    let mut rng = seed::rng(seed);
    let mut exceed = 0usize;

    if let Some(binary) = scorer.binary_fast_path() {
        let total: f64 = values.iter().sum();
        for _ in 0..config.n_permutations {
            if binary.statistic(&mut values, total, &mut rng) >= threshold {
                exceed += 1;
            }
        }
    } else {
        for _ in 0..config.n_permutations {
            values.shuffle(&mut rng);
            if scorer.max_statistic(&values) >= threshold {
                exceed += 1;
            }
        }
    }

    let p_value = (exceed as f64 + 1.0) / (config.n_permutations as f64 + 1.0);
    Ok(outcome(p_value, exceed, classify_heuristic(&left_stats, &right_stats)))
}

/// Bias/variance verdict for a split from the residual summaries of its two
/// sides. One delta must be at least 1.5 times the other to win outright.
pub fn classify_heuristic(left: &GroupStats, right: &GroupStats) -> IssueClass {
    let bias_delta = (left.mean_residual - right.mean_residual).abs();
    let var_delta = (left.var_residual - right.var_residual).abs();
    classify_deltas(bias_delta, var_delta)
}

pub fn classify_deltas(bias_delta: f64, var_delta: f64) -> IssueClass {
    if bias_delta >= DOMINANCE_RATIO * var_delta {
        IssueClass::Bias
    } else if var_delta >= DOMINANCE_RATIO * bias_delta {
        IssueClass::Variance
    } else {
        IssueClass::Both
    }
}

struct Scorer<'a> {
    layout: &'a BlockLayout,
    nominal: bool,
    min_leaf: usize,
}

struct BinaryPath {
    /// Size of the smaller block; a random subset of this size is drawn.
    k: usize,
    small_is_first: bool,
    n_first: f64,
    n_second: f64,
}

impl BinaryPath {
    fn statistic(&self, values: &mut [f64], total: f64, rng: &mut seed::Rng) -> f64 {
        let m = values.len();
        let mut sub = 0.0;
        for i in 0..self.k {
            let j = rng.gen_range(i..m);
            values.swap(i, j);
            sub += values[i];
        }
        let first = if self.small_is_first { sub } else { total - sub };
        (first / self.n_first - (total - first) / self.n_second).abs()
    }
}

impl<'a> Scorer<'a> {
    fn new(layout: &'a BlockLayout, scale: Scale, min_leaf: usize) -> Self {
        Self {
            layout,
            nominal: scale == Scale::Nominal,
            min_leaf: min_leaf.max(1),
        }
    }

    fn binary_fast_path(&self) -> Option<BinaryPath> {
        if self.layout.n_blocks() != 2 {
            return None;
        }
        let (a, b) = (self.layout.block_len(0), self.layout.block_len(1));
        if a.min(b) < self.min_leaf {
            return None;
        }
        Some(BinaryPath {
            k: a.min(b),
            small_is_first: a <= b,
            n_first: a as f64,
            n_second: b as f64,
        })
    }

    fn block_sums(&self, values: &[f64]) -> Vec<f64> {
        (0..self.layout.n_blocks())
            .map(|b| values[self.layout.block_range(b)].iter().sum())
            .collect()
    }

    /// Block visiting order: natural for ordered columns, ascending mean loss
    /// (ties by code) for nominal ones.
    fn block_order(&self, values: &[f64]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.layout.n_blocks()).collect();
        if self.nominal {
            let sums = self.block_sums(values);
            let means: Vec<f64> = sums
                .iter()
                .enumerate()
                .map(|(b, s)| s / self.layout.block_len(b) as f64)
                .collect();
            order.sort_by(|&x, &y| {
                means[x]
                    .total_cmp(&means[y])
                    .then(self.layout.codes[x].cmp(&self.layout.codes[y]))
            });
        }
        order
    }

    /// `(k, statistic)` for every admissible cut after position `k` of `order`.
    fn cuts(&self, values: &[f64], order: &[usize]) -> Vec<(usize, f64)> {
        let sums = self.block_sums(values);
        let total: f64 = sums.iter().sum();
        let n = values.len();
        let mut out = Vec::new();
        let (mut left_sum, mut left_n) = (0.0, 0usize);
        for (k, &b) in order.iter().enumerate().take(order.len().saturating_sub(1)) {
            left_sum += sums[b];
            left_n += self.layout.block_len(b);
            let right_n = n - left_n;
            if left_n < self.min_leaf || right_n < self.min_leaf {
                continue;
            }
            let stat = (left_sum / left_n as f64 - (total - left_sum) / right_n as f64).abs();
            out.push((k, stat));
        }
        out
    }

    fn max_statistic(&self, values: &[f64]) -> f64 {
        let order = self.block_order(values);
        self.cuts(values, &order)
            .into_iter()
            .map(|(_, s)| s)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LossKind;

    fn dataset_with(residuals: &[f64], column: CovariateColumn) -> AuditDataset {
        AuditDataset::build(
            vec![0.0; residuals.len()],
            residuals.to_vec(),
            vec![column],
            LossKind::SquaredError,
        )
        .unwrap()
    }

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn continuous_midpoints() {
        let col = CovariateColumn::continuous("x", vec![1.0, 2.0, 3.0]).unwrap();
        let c = enumerate_splits(&col, &[0.3, 0.1, 0.7], &[0, 1, 2]).unwrap();
        let thresholds: Vec<_> = c.iter().map(|c| c.rule.clone()).collect();
        assert_eq!(
            thresholds,
            vec![
                SplitRule::Threshold { value: 1.5 },
                SplitRule::Threshold { value: 2.5 }
            ]
        );
        assert_eq!(c[0].left, vec![0]);
        assert_eq!(c[1].right, vec![2]);
    }

    #[test]
    fn nominal_cart_ordering() {
        // Mean losses A: 0.5, B: 0.1, C: 0.9 -> order B, A, C.
        let col = CovariateColumn::nominal("t", vec![0, 1, 2], labels(&["A", "B", "C"])).unwrap();
        let c = enumerate_splits(&col, &[0.5, 0.1, 0.9], &[0, 1, 2]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(
            c[0].rule,
            SplitRule::CategorySet { codes: vec![1], labels: labels(&["B"]) }
        );
        assert_eq!(
            c[1].rule,
            SplitRule::CategorySet { codes: vec![0, 1], labels: labels(&["A", "B"]) }
        );
        assert_eq!(c[0].left, vec![1]);
        assert_eq!(c[1].right, vec![2]);
    }

    #[test]
    fn binary_and_degenerate_columns() {
        let col = CovariateColumn::nominal("g", vec![0, 1, 0, 1], labels(&["m", "f"])).unwrap();
        assert_eq!(enumerate_splits(&col, &[0.0; 4], &[0, 1, 2, 3]).unwrap().len(), 1);

        let flat = CovariateColumn::continuous("x", vec![2.0; 4]).unwrap();
        assert_eq!(
            enumerate_splits(&flat, &[0.0; 4], &[0, 1, 2, 3]),
            Err(TestError::DegenerateColumn("x".into()))
        );
    }

    #[test]
    fn min_leaf_filters_candidates() {
        let col = CovariateColumn::continuous("x", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = enumerate_splits_with_min_leaf(&col, &[0.0; 4], &[0, 1, 2, 3], 2).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].rule, SplitRule::Threshold { value: 2.5 });
    }

    #[test]
    fn heuristic_classification() {
        assert_eq!(classify_deltas(1.0, 0.1), IssueClass::Bias);
        assert_eq!(classify_deltas(0.1, 1.0), IssueClass::Variance);
        assert_eq!(classify_deltas(0.3, 0.3), IssueClass::Both);
        assert_eq!(classify_deltas(0.31, 0.2), IssueClass::Bias);
        assert_eq!(classify_deltas(0.29, 0.2), IssueClass::Both);
    }

    #[test]
    fn two_by_two_exhaustive_p() {
        // Losses [0,0] vs [1,1]: 2 of the 6 relabelings are as extreme.
        let col = CovariateColumn::nominal("g", vec![0, 0, 1, 1], labels(&["a", "b"])).unwrap();
        let d = dataset_with(&[0.0, 0.0, 1.0, 1.0], col.clone());
        let cfg = PermConfig { n_permutations: 60_000, min_leaf: 1 };
        let out = perm_test_covariate(&d, &col, &[0, 1, 2, 3], &cfg, 7).unwrap();
        assert!((out.p_value - 1.0 / 3.0).abs() < 0.01, "p = {}", out.p_value);
        assert_eq!(out.classification, IssueClass::Bias);
        assert_eq!(
            out.p_value,
            (out.exceed_count as f64 + 1.0) / (cfg.n_permutations as f64 + 1.0)
        );
    }

    #[test]
    fn constant_loss_gives_p_one() {
        let col = CovariateColumn::nominal("g", vec![0, 0, 1, 1], labels(&["a", "b"])).unwrap();
        let d = dataset_with(&[1.0, -1.0, 1.0, -1.0], col.clone());
        let out = perm_test_covariate(&d, &col, &[0, 1, 2, 3], &PermConfig::default(), 1).unwrap();
        assert_eq!(out.p_value, 1.0);
        assert_eq!(out.classification, IssueClass::None);
    }

    #[test]
    fn same_seed_same_result() {
        let x: Vec<f64> = (0..40).map(|i| (i * 7 % 13) as f64).collect();
        let r: Vec<f64> = (0..40).map(|i| ((i * 31 % 17) as f64 - 8.0) / 4.0).collect();
        let col = CovariateColumn::continuous("x", x).unwrap();
        let d = dataset_with(&r, col.clone());
        let node = d.all_indices();
        let cfg = PermConfig { n_permutations: 500, min_leaf: 1 };
        let a = perm_test_covariate(&d, &col, &node, &cfg, 99).unwrap();
        let b = perm_test_covariate(&d, &col, &node, &cfg, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_transform_keeps_p() {
        let x: Vec<f64> = (0..30).map(|i| ((i * 11) % 30) as f64 / 3.0).collect();
        let r: Vec<f64> = (0..30).map(|i| if i % 3 == 0 { 1.5 } else { (i % 5) as f64 * 0.2 }).collect();
        let col = CovariateColumn::continuous("x", x.clone()).unwrap();
        let col_t = CovariateColumn::continuous("x", x.iter().map(|v| v.exp() + 3.0).collect()).unwrap();
        let d = dataset_with(&r, col.clone());
        let node = d.all_indices();
        let cfg = PermConfig { n_permutations: 400, min_leaf: 1 };
        let a = perm_test_covariate(&d, &col, &node, &cfg, 5).unwrap();
        let b = perm_test_covariate(&d, &col_t, &node, &cfg, 5).unwrap();
        assert_eq!(a.p_value, b.p_value);
        assert_eq!(a.left, b.left);
    }
}
