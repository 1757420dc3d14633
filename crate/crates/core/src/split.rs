//! Split rules and the covariate orderings both test engines work on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ColumnValues, CovariateColumn};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TestError {
    #[error("covariate `{0}` has no admissible split at this node")]
    DegenerateColumn(String),
    #[error("node has {n} observations, engine requires at least {min}")]
    NodeTooSmall { n: usize, min: usize },
    #[error("break index {index} is invalid for {n} observations")]
    InvalidBreak { index: usize, n: usize },
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Binary partition of a node by one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitRule {
    /// Continuous covariate; left holds values `<= value`.
    Threshold { value: f64 },
    /// Ordinal covariate; left holds levels up to and including `level`.
    LevelAtMost { level: usize, label: String },
    /// Nominal covariate; left holds the listed categories.
    CategorySet { codes: Vec<usize>, labels: Vec<String> },
}

impl SplitRule {
    pub fn goes_left(&self, column: &CovariateColumn, row: usize) -> bool {
        match (self, column.values()) {
            (SplitRule::Threshold { value }, ColumnValues::Continuous(v)) => v[row] <= *value,
            (SplitRule::LevelAtMost { level, .. }, ColumnValues::Categorical { codes, .. }) => {
                codes[row] <= *level
            }
            (SplitRule::CategorySet { codes: left, .. }, ColumnValues::Categorical { codes, .. }) => {
                left.contains(&codes[row])
            }
            // A rule built for another scale never matches.
            _ => false,
        }
    }

    pub fn partition(&self, column: &CovariateColumn, rows: &[usize]) -> (Vec<usize>, Vec<usize>) {
        rows.iter().partition(|&&r| self.goes_left(column, r))
    }

    /// Branch conditions as text, `(left, right)`.
    pub fn describe(&self, name: &str) -> (String, String) {
        match self {
            SplitRule::Threshold { value } => (format!("{name} <= {value}"), format!("{name} > {value}")),
            SplitRule::LevelAtMost { label, .. } => {
                (format!("{name} <= {label}"), format!("{name} > {label}"))
            }
            SplitRule::CategorySet { labels, .. } => {
                let set = labels.join(", ");
                (format!("{name} in {{{set}}}"), format!("{name} not in {{{set}}}"))
            }
        }
    }
}

/// Node rows arranged so that rows sharing a covariate value form contiguous
/// blocks. Continuous and ordinal columns keep blocks in increasing value
/// order; nominal columns list categories by code.
#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    pub rows: Vec<usize>,
    /// Exclusive end offset of each block within `rows`.
    pub ends: Vec<usize>,
    /// Category code for categorical blocks, `usize::MAX` for continuous ones.
    pub codes: Vec<usize>,
}

impl BlockLayout {
    pub fn new(column: &CovariateColumn, node: &[usize]) -> Self {
        let mut rows = node.to_vec();
        // Stable: tied rows keep their node order.
        rows.sort_by(|&a, &b| column.key(a).total_cmp(&column.key(b)));
        let mut ends = Vec::new();
        let mut codes = Vec::new();
        for i in 1..=rows.len() {
            if i == rows.len() || column.key(rows[i]) != column.key(rows[i - 1]) {
                ends.push(i);
                codes.push(column.code(rows[i - 1]).unwrap_or(usize::MAX));
            }
        }
        Self { rows, ends, codes }
    }

    pub fn n_blocks(&self) -> usize {
        self.ends.len()
    }

    pub fn block_len(&self, b: usize) -> usize {
        self.ends[b] - if b == 0 { 0 } else { self.ends[b - 1] }
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let start = if b == 0 { 0 } else { self.ends[b - 1] };
        start..self.ends[b]
    }
}

/// Rule that sends the first `k + 1` blocks of `layout` left, for ordered
/// (continuous or ordinal) columns.
pub(crate) fn ordered_cut_rule(column: &CovariateColumn, layout: &BlockLayout, k: usize) -> SplitRule {
    let last_left = layout.rows[layout.ends[k] - 1];
    let first_right = layout.rows[layout.ends[k]];
    match column.values() {
        ColumnValues::Continuous(v) => SplitRule::Threshold {
            value: 0.5 * (v[last_left] + v[first_right]),
        },
        ColumnValues::Categorical { codes, labels } => {
            let level = codes[last_left];
            SplitRule::LevelAtMost {
                level,
                label: labels[level].clone(),
            }
        }
    }
}

pub(crate) fn category_set_rule(column: &CovariateColumn, mut codes: Vec<usize>) -> SplitRule {
    codes.sort_unstable();
    let labels = column
        .labels()
        .map(|l| codes.iter().map(|&c| l[c].clone()).collect())
        .unwrap_or_default();
    SplitRule::CategorySet { codes, labels }
}
