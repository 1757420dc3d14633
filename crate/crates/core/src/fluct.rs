//! Fluctuation test for residual invariance along one covariate.
//!
//! Residuals are ordered by the covariate and turned into a scaled CUSUM
//! process. Under invariance the process behaves like a Brownian bridge, so
//! the maximum of its absolute value is referred to the Kolmogorov
//! distribution. A second process over squared, conditionally centered
//! residuals tests for a shift in spread.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{AuditDataset, CovariateColumn, IssueClass, Scale};
use crate::seed;
use crate::split::{category_set_rule, ordered_cut_rule, BlockLayout, SplitRule, TestError};

pub const DEFAULT_MIN_LEAF: usize = 10;

/// Scaled CUSUM of centered values; `values[i]` is the process at `(i+1)/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctProcess {
    pub values: Vec<f64>,
    /// Sample standard deviation used for scaling.
    pub scale_estimate: f64,
}

pub fn cusum_process(ordered: &[f64]) -> Result<FluctProcess, TestError> {
    let n = ordered.len();
    if n < 2 {
        return Err(TestError::NodeTooSmall { n, min: 2 });
    }
    let mean = ordered.iter().sum::<f64>() / n as f64;
    let ss: f64 = ordered.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    let magnitude = ordered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(sd > 1e-10 * magnitude) {
        return Err(TestError::ZeroVariance);
    }

    let scale = sd * (n as f64).sqrt();
    let mut acc = 0.0;
    let values = ordered
        .iter()
        .map(|v| {
            acc += v - mean;
            acc / scale
        })
        .collect();
    Ok(FluctProcess {
        values,
        scale_estimate: sd,
    })
}

/// Largest absolute process value and the first index attaining it.
pub fn max_statistic(process: &FluctProcess) -> (f64, usize) {
    process
        .values
        .iter()
        .enumerate()
        .fold((0.0, 0), |(s, k), (i, v)| if v.abs() > s { (v.abs(), i) } else { (s, k) })
}

const SERIES_TOL: f64 = 1e-12;
const SERIES_MAX_TERMS: usize = 100;

/// Survival function of the Kolmogorov distribution, i.e. the probability
/// that the supremum of a standard Brownian bridge's absolute value exceeds `x`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    let sf = if x >= 1.0 {
        // 2 * sum (-1)^(k-1) exp(-2 k^2 x^2)
        let mut sum = 0.0;
        for k in 1..=SERIES_MAX_TERMS {
            let term = (-2.0 * (k * k) as f64 * x * x).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < SERIES_TOL {
                break;
            }
        }
        2.0 * sum
    } else {
        // The alternating series converges slowly below 1; use the dual form
        // of the CDF, sqrt(2 pi)/x * sum exp(-(2k-1)^2 pi^2 / (8 x^2)).
        let c = std::f64::consts::PI * std::f64::consts::PI / (8.0 * x * x);
        let mut sum = 0.0;
        for k in 1..=SERIES_MAX_TERMS {
            let odd = (2 * k - 1) as f64;
            let term = (-odd * odd * c).exp();
            sum += term;
            if term < SERIES_TOL {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * sum
    };
    sf.clamp(0.0, 1.0)
}

/// Critical value `x` with `kolmogorov_sf(x) == p`, by bisection.
pub fn kolmogorov_isf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    let (mut lo, mut hi) = (0.0f64, 10.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_sf(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Subtracts segment means on either side of `break_index` (inclusive on the
/// left), or the global mean when no break is given.
pub fn conditional_center(ordered: &[f64], break_index: Option<usize>) -> Result<Vec<f64>, TestError> {
    let n = ordered.len();
    fn center(seg: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let m = seg.iter().sum::<f64>() / seg.len() as f64;
        seg.iter().map(move |v| v - m)
    }
    match break_index {
        None if n == 0 => Ok(Vec::new()),
        None => Ok(center(ordered).collect()),
        Some(k) if k + 1 >= n => Err(TestError::InvalidBreak { index: k, n }),
        Some(k) => Ok(center(&ordered[..=k]).chain(center(&ordered[k + 1..])).collect()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctConfig {
    pub alpha: f64,
    /// Minimum node size, also required of both children of a split.
    pub min_leaf: usize,
}

impl Default for FluctConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_leaf: DEFAULT_MIN_LEAF,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctTestOutcome {
    pub covariate: String,
    pub s_bias: f64,
    pub p_bias: f64,
    pub s_var: f64,
    pub p_var: f64,
    /// Position of the split in the covariate-sorted test sample; the left
    /// side holds positions `0..=break_index`. Taken from the bias process
    /// unless the variance process has the smaller p-value.
    pub break_index: usize,
    /// Observations entering the processes (half the node for the holdout
    /// ordering of multi-category nominal columns).
    pub n_tested: usize,
    pub rule: SplitRule,
    pub classification: IssueClass,
    pub significant: bool,
    #[serde(skip)]
    pub left: Vec<usize>,
    #[serde(skip)]
    pub right: Vec<usize>,
}

impl FluctTestOutcome {
    /// Bonferroni combination of the bias and variance p-values. Below `alpha`
    /// exactly when one of them is below `alpha / 2`.
    pub fn p_value(&self) -> f64 {
        (2.0 * self.p_bias.min(self.p_var)).min(1.0)
    }
}

/// Fluctuation test dispatching on the column's scale.
pub fn fluct_test(
    dataset: &AuditDataset,
    column: &CovariateColumn,
    node: &[usize],
    config: &FluctConfig,
    seed: u64,
) -> Result<FluctTestOutcome, TestError> {
    match column.scale() {
        Scale::Continuous | Scale::Ordinal => fluct_test_continuous(dataset, column, node, config),
        Scale::Nominal => fluct_test_nominal(dataset, column, node, config, seed),
    }
}

/// Test along a continuous or ordinal covariate (ordinal levels sort by their
/// declared order).
pub fn fluct_test_continuous(
    dataset: &AuditDataset,
    column: &CovariateColumn,
    node: &[usize],
    config: &FluctConfig,
) -> Result<FluctTestOutcome, TestError> {
    check_node(node, config)?;
    if column.scale() == Scale::Nominal {
        return Err(TestError::InvalidConfig(format!(
            "`{}` is nominal; use the nominal test",
            column.name()
        )));
    }
    let layout = BlockLayout::new(column, node);
    let block_of = block_ranks(&layout);
    let counts: Vec<usize> = (0..layout.n_blocks()).map(|b| layout.block_len(b)).collect();
    let sample = OrderedSample {
        rows: &layout.rows,
        block_of: &block_of,
        block_counts: &counts,
    };
    let core = sample.run(dataset.residuals(), config, column.name())?;
    let rule = ordered_cut_rule(column, &layout, block_of[core.break_index]);
    Ok(core.finish(column, node, rule))
}

/// Test along a nominal covariate.
///
/// Two categories are ordered by their mean residual on the whole node. With
/// more categories a seeded half of the node fixes the ordering and the other
/// half is tested, so the ordering cannot leak into the statistic.
pub fn fluct_test_nominal(
    dataset: &AuditDataset,
    column: &CovariateColumn,
    node: &[usize],
    config: &FluctConfig,
    seed: u64,
) -> Result<FluctTestOutcome, TestError> {
    check_node(node, config)?;
    let labels = column
        .labels()
        .ok_or_else(|| TestError::InvalidConfig(format!("`{}` is not categorical", column.name())))?;
    let k = labels.len();
    let residuals = dataset.residuals();
    let code = |r: usize| column.code(r).expect("categorical column");

    let mut node_counts = vec![0usize; k];
    node.iter().for_each(|&r| node_counts[code(r)] += 1);
    let present = node_counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(TestError::DegenerateColumn(column.name().to_string()));
    }

    let (ordering_rows, tested): (Vec<usize>, Vec<usize>) = if present == 2 {
        (node.to_vec(), node.to_vec())
    } else {
        let mut shuffled = node.to_vec();
        shuffled.shuffle(&mut seed::rng(seed));
        let half = shuffled.len() / 2;
        let mut tested = shuffled[half..].to_vec();
        tested.sort_unstable();
        (shuffled[..half].to_vec(), tested)
    };

    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for &r in &ordering_rows {
        sums[code(r)] += residuals[r];
        counts[code(r)] += 1;
    }
    let fallback = sums.iter().sum::<f64>() / ordering_rows.len().max(1) as f64;
    let means: Vec<f64> = (0..k)
        .map(|c| if counts[c] > 0 { sums[c] / counts[c] as f64 } else { fallback })
        .collect();
    // Rank only categories present at the node; absent ones never split.
    let mut ranked: Vec<usize> = (0..k).filter(|&c| node_counts[c] > 0).collect();
    ranked.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let mut rank_of = vec![usize::MAX; k];
    ranked.iter().enumerate().for_each(|(i, &c)| rank_of[c] = i);

    let mut rows = tested;
    rows.sort_by_key(|&r| rank_of[code(r)]);
    let block_of: Vec<usize> = rows.iter().map(|&r| rank_of[code(r)]).collect();
    if block_of.first() == block_of.last() {
        return Err(TestError::DegenerateColumn(column.name().to_string()));
    }
    let block_counts: Vec<usize> = ranked.iter().map(|&c| node_counts[c]).collect();
    let sample = OrderedSample {
        rows: &rows,
        block_of: &block_of,
        block_counts: &block_counts,
    };
    let core = sample.run(residuals, config, column.name())?;
    let left_codes = ranked[..=block_of[core.break_index]].to_vec();
    Ok(core.finish(column, node, category_set_rule(column, left_codes)))
}

fn check_node(node: &[usize], config: &FluctConfig) -> Result<(), TestError> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(TestError::InvalidConfig(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    let min = config.min_leaf.max(2);
    if node.len() < min {
        return Err(TestError::NodeTooSmall { n: node.len(), min });
    }
    Ok(())
}

fn block_ranks(layout: &BlockLayout) -> Vec<usize> {
    let mut out = Vec::with_capacity(layout.rows.len());
    for b in 0..layout.n_blocks() {
        out.extend(std::iter::repeat(b).take(layout.block_len(b)));
    }
    out
}

/// Test sample sorted by block rank. `block_counts` are node-level sizes per
/// rank, which decide whether a cut leaves both children large enough.
struct OrderedSample<'a> {
    rows: &'a [usize],
    block_of: &'a [usize],
    block_counts: &'a [usize],
}

struct CoreOutcome {
    covariate: String,
    s_bias: f64,
    p_bias: f64,
    s_var: f64,
    p_var: f64,
    break_index: usize,
    n_tested: usize,
    classification: IssueClass,
}

impl CoreOutcome {
    fn finish(self, column: &CovariateColumn, node: &[usize], rule: SplitRule) -> FluctTestOutcome {
        let (left, right) = rule.partition(column, node);
        FluctTestOutcome {
            covariate: self.covariate,
            s_bias: self.s_bias,
            p_bias: self.p_bias,
            s_var: self.s_var,
            p_var: self.p_var,
            break_index: self.break_index,
            n_tested: self.n_tested,
            rule,
            significant: self.classification != IssueClass::None,
            classification: self.classification,
            left,
            right,
        }
    }
}

impl OrderedSample<'_> {
    /// Positions `i` where a cut between `i` and `i + 1` separates distinct
    /// covariate values and leaves `min_leaf` node observations on each side.
    fn admissible_breaks(&self, min_leaf: usize) -> Vec<usize> {
        let total: usize = self.block_counts.iter().sum();
        let mut left_of_rank = vec![0usize; self.block_counts.len()];
        let mut acc = 0;
        for (r, &c) in self.block_counts.iter().enumerate() {
            acc += c;
            left_of_rank[r] = acc;
        }
        (0..self.rows.len().saturating_sub(1))
            .filter(|&i| self.block_of[i] != self.block_of[i + 1])
            .filter(|&i| {
                let left = left_of_rank[self.block_of[i]];
                left >= min_leaf && total - left >= min_leaf
            })
            .collect()
    }

    fn run(&self, residuals: &[f64], config: &FluctConfig, name: &str) -> Result<CoreOutcome, TestError> {
        let admissible = self.admissible_breaks(config.min_leaf.max(1));
        if admissible.is_empty() {
            return Err(TestError::DegenerateColumn(name.to_string()));
        }
        let ordered: Vec<f64> = self.rows.iter().map(|&r| residuals[r]).collect();
        let n = ordered.len();

        let (s_bias, p_bias, break_index, raw_break) = match cusum_process(&ordered) {
            Ok(process) => {
                let (s, raw) = max_statistic(&process);
                (s, kolmogorov_sf(s), admissible_argmax(&process, &admissible), raw.min(n - 2))
            }
            Err(TestError::ZeroVariance) => (0.0, 1.0, admissible[0], admissible[0]),
            Err(e) => return Err(e),
        };

        let centered = if p_bias < config.alpha {
            // The break actually used for a split is preferred; the raw argmax
            // can fall inside a block of tied covariate values.
            let k = if admissible.contains(&break_index) { break_index } else { raw_break };
            conditional_center(&ordered, Some(k))?
        } else {
            conditional_center(&ordered, None)?
        };
        let squared: Vec<f64> = centered.iter().map(|v| v * v).collect();
        let (s_var, p_var, var_break) = match cusum_process(&squared) {
            Ok(process) => {
                let s = max_statistic(&process).0;
                (s, kolmogorov_sf(s), admissible_argmax(&process, &admissible))
            }
            Err(TestError::ZeroVariance) => (0.0, 1.0, break_index),
            Err(e) => return Err(e),
        };
        // Split where the stronger of the two processes peaks.
        let break_index = if p_var < p_bias { var_break } else { break_index };

        Ok(CoreOutcome {
            covariate: name.to_string(),
            s_bias,
            p_bias,
            s_var,
            p_var,
            break_index,
            n_tested: n,
            classification: classify_sequential(p_bias, p_var, config.alpha),
        })
    }
}

/// First admissible position with the largest |W|.
fn admissible_argmax(process: &FluctProcess, admissible: &[usize]) -> usize {
    admissible.iter().copied().fold(admissible[0], |best, i| {
        if process.values[i].abs() > process.values[best].abs() {
            i
        } else {
            best
        }
    })
}

/// Verdict from the two p-values, each judged at `alpha / 2`.
pub fn classify_sequential(p_bias: f64, p_var: f64, alpha: f64) -> IssueClass {
    let level = alpha / 2.0;
    match (p_bias < level, p_var < level) {
        (true, true) => IssueClass::Both,
        (true, false) => IssueClass::Bias,
        (false, true) => IssueClass::Variance,
        (false, false) => IssueClass::None,
    }
}
