//! Recursive partitioning over all covariates.
//!
//! At each node every covariate is tested with the configured engine, the
//! p-values are Bonferroni-adjusted by the number of covariates actually
//! tested, and the node is split on the covariate with the smallest adjusted
//! p-value if it falls below `alpha`. Children are evaluated the same way at
//! the full `alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AuditDataset, GroupStats, IssueClass};
use crate::fluct::{self, FluctConfig, FluctTestOutcome};
use crate::perm::{self, PermConfig, PermTestOutcome};
use crate::seed;
use crate::split::{SplitRule, TestError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Permutation,
    Fluctuation,
}

impl Engine {
    pub fn as_str(self) -> &'static str {
        match self {
            Engine::Permutation => "permutation",
            Engine::Fluctuation => "fluctuation",
        }
    }

    pub fn default_min_node(self) -> usize {
        match self {
            Engine::Permutation => 1,
            Engine::Fluctuation => fluct::DEFAULT_MIN_LEAF,
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "permutation" => Ok(Engine::Permutation),
            "fluctuation" => Ok(Engine::Fluctuation),
            other => Err(format!("unknown engine `{other}` (expected permutation|fluctuation)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub engine: Engine,
    pub alpha: f64,
    pub n_permutations: usize,
    /// Minimum node size; a split must leave at least this many on each side.
    pub min_node: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl AuditConfig {
    pub fn new(engine: Engine) -> Self {
        Self {
            engine,
            alpha: 0.05,
            n_permutations: perm::DEFAULT_PERMUTATIONS,
            min_node: engine.default_min_node(),
            max_depth: 5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TestError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(TestError::InvalidConfig(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.min_node == 0 {
            return Err(TestError::InvalidConfig("min_node must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(TestError::InvalidConfig("max_depth must be >= 1".into()));
        }
        if self.engine == Engine::Permutation && self.n_permutations == 0 {
            return Err(TestError::InvalidConfig("n_permutations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of one engine run on one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum TestOutcome {
    Permutation(PermTestOutcome),
    Fluctuation(FluctTestOutcome),
}

impl TestOutcome {
    /// Covariate-level p-value before multiplicity adjustment.
    pub fn p_value(&self) -> f64 {
        match self {
            TestOutcome::Permutation(o) => o.p_value,
            TestOutcome::Fluctuation(o) => o.p_value(),
        }
    }

    pub fn classification(&self) -> IssueClass {
        match self {
            TestOutcome::Permutation(o) => o.classification,
            TestOutcome::Fluctuation(o) => o.classification,
        }
    }

    pub fn rule(&self) -> &SplitRule {
        match self {
            TestOutcome::Permutation(o) => &o.rule,
            TestOutcome::Fluctuation(o) => &o.rule,
        }
    }

    pub fn covariate(&self) -> &str {
        match self {
            TestOutcome::Permutation(o) => &o.covariate,
            TestOutcome::Fluctuation(o) => &o.covariate,
        }
    }

    fn sides(&self) -> (&[usize], &[usize]) {
        match self {
            TestOutcome::Permutation(o) => (&o.left, &o.right),
            TestOutcome::Fluctuation(o) => (&o.left, &o.right),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateResult {
    /// Declaration order of the covariate in the dataset.
    pub index: usize,
    pub outcome: TestOutcome,
    pub raw_p: f64,
    pub adjusted_p: f64,
}

/// Runs the configured engine on every covariate that admits a split at this
/// node. Results keep declaration order; degenerate columns are omitted and
/// do not count towards the Bonferroni factor.
pub fn test_covariates(
    dataset: &AuditDataset,
    node: &[usize],
    config: &AuditConfig,
    node_seed: u64,
) -> Vec<CovariateResult> {
    let tested: Vec<(usize, TestOutcome)> = dataset
        .covariates()
        .par_iter()
        .enumerate()
        .filter_map(|(index, column)| {
            let seed = seed::derive_str(node_seed, column.name());
            let outcome = match config.engine {
                Engine::Permutation => {
                    let cfg = PermConfig {
                        n_permutations: config.n_permutations,
                        min_leaf: config.min_node,
                    };
                    perm::perm_test_covariate(dataset, column, node, &cfg, seed).map(TestOutcome::Permutation)
                }
                Engine::Fluctuation => {
                    let cfg = FluctConfig {
                        alpha: config.alpha,
                        min_leaf: config.min_node,
                    };
                    fluct::fluct_test(dataset, column, node, &cfg, seed).map(TestOutcome::Fluctuation)
                }
            };
            outcome.ok().map(|o| (index, o))
        })
        .collect();

    let m = tested.len() as f64;
    tested
        .into_iter()
        .map(|(index, outcome)| {
            let raw_p = outcome.p_value();
            CovariateResult {
                index,
                raw_p,
                adjusted_p: (m * raw_p).min(1.0),
                outcome,
            }
        })
        .collect()
}

/// Smallest adjusted p-value, if below `alpha`; ties go to the covariate
/// declared first.
pub fn select(results: Vec<CovariateResult>, alpha: f64) -> Option<(CovariateResult, usize)> {
    let m = results.len();
    results
        .into_iter()
        .fold(None::<CovariateResult>, |best, r| match best {
            Some(b) if b.adjusted_p <= r.adjusted_p => Some(b),
            _ => Some(r),
        })
        .filter(|b| b.adjusted_p < alpha)
        .map(|b| (b, m))
}

pub fn evaluate_node(
    dataset: &AuditDataset,
    node: &[usize],
    config: &AuditConfig,
    node_seed: u64,
) -> Option<CovariateResult> {
    select(test_covariates(dataset, node, config, node_seed), config.alpha).map(|(r, _)| r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafReason {
    NoSignificantSplit,
    TooSmall,
    MaxDepth,
}

impl LeafReason {
    pub fn as_str(self) -> &'static str {
        match self {
            LeafReason::NoSignificantSplit => "no_significant_split",
            LeafReason::TooSmall => "too_small",
            LeafReason::MaxDepth => "max_depth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditNode {
    /// Pre-order position in the tree, root = 0.
    pub id: usize,
    pub depth: usize,
    /// Seed the node's tests were drawn from.
    pub seed: u64,
    pub indices: Vec<usize>,
    pub stats: GroupStats,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Internal {
        covariate: String,
        outcome: TestOutcome,
        raw_p: f64,
        adjusted_p: f64,
        n_tested: usize,
        children: Box<[AuditNode; 2]>,
    },
    Leaf {
        reason: LeafReason,
    },
}

impl AuditNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }

    pub fn children(&self) -> Option<&[AuditNode; 2]> {
        match &self.kind {
            NodeKind::Internal { children, .. } => Some(children),
            NodeKind::Leaf { .. } => None,
        }
    }

    /// Pre-order traversal.
    pub fn walk(&self) -> Vec<&AuditNode> {
        let mut out = vec![self];
        if let Some(ch) = self.children() {
            out.extend(ch[0].walk());
            out.extend(ch[1].walk());
        }
        out
    }

    fn number(&mut self, next: &mut usize) {
        self.id = *next;
        *next += 1;
        if let NodeKind::Internal { children, .. } = &mut self.kind {
            children[0].number(next);
            children[1].number(next);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditTree {
    pub root: AuditNode,
    pub config: AuditConfig,
    pub n: usize,
    pub covariate_names: Vec<String>,
}

impl AuditTree {
    pub fn leaves(&self) -> Vec<&AuditNode> {
        self.root.walk().into_iter().filter(|n| n.is_leaf()).collect()
    }

    /// Names of covariates used by any split, in pre-order, deduplicated.
    pub fn split_covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for node in self.root.walk() {
            if let NodeKind::Internal { covariate, .. } = &node.kind {
                if !out.contains(covariate) {
                    out.push(covariate.clone());
                }
            }
        }
        out
    }
}

/// Grows the audit tree depth-first.
pub fn grow_tree(dataset: &AuditDataset, config: &AuditConfig) -> Result<AuditTree, TestError> {
    config.validate()?;
    let mut root = grow(dataset, dataset.all_indices(), 0, config.seed, config);
    root.number(&mut 0);
    Ok(AuditTree {
        root,
        config: *config,
        n: dataset.n(),
        covariate_names: dataset.covariates().iter().map(|c| c.name().to_string()).collect(),
    })
}

fn grow(dataset: &AuditDataset, indices: Vec<usize>, depth: usize, node_seed: u64, config: &AuditConfig) -> AuditNode {
    let stats = dataset.group_stats(&indices).expect("nodes are never empty");
    let leaf = |indices, reason| AuditNode {
        id: 0,
        depth,
        seed: node_seed,
        indices,
        stats,
        kind: NodeKind::Leaf { reason },
    };

    if depth >= config.max_depth {
        return leaf(indices, LeafReason::MaxDepth);
    }
    if indices.len() < 2 * config.min_node.max(1) {
        return leaf(indices, LeafReason::TooSmall);
    }
    let Some((best, n_tested)) = select(test_covariates(dataset, &indices, config, node_seed), config.alpha) else {
        return leaf(indices, LeafReason::NoSignificantSplit);
    };

    let (left, right) = best.outcome.sides();
    let (left, right) = (left.to_vec(), right.to_vec());
    let (l, r) = rayon::join(
        || grow(dataset, left, depth + 1, seed::derive(node_seed, 0), config),
        || grow(dataset, right, depth + 1, seed::derive(node_seed, 1), config),
    );
    AuditNode {
        id: 0,
        depth,
        seed: node_seed,
        indices,
        stats,
        kind: NodeKind::Internal {
            covariate: best.outcome.covariate().to_string(),
            raw_p: best.raw_p,
            adjusted_p: best.adjusted_p,
            n_tested,
            outcome: best.outcome,
            children: Box::new([l, r]),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityEntry {
    pub covariate: String,
    pub raw_p: f64,
    pub adjusted_p: f64,
    /// `adjusted_p < alpha`.
    pub flagged: bool,
    /// Engine verdict for flagged covariates, `None` otherwise.
    pub classification: IssueClass,
    pub split: String,
    pub outcome: TestOutcome,
}

/// One engine run per covariate on the full dataset, ranked by raw p-value
/// (ties keep declaration order). No recursion. Adjusted p-values use the
/// number of covariates tested.
pub fn priority_audit(dataset: &AuditDataset, config: &AuditConfig) -> Result<Vec<PriorityEntry>, TestError> {
    config.validate()?;
    let mut results = test_covariates(dataset, &dataset.all_indices(), config, config.seed);
    results.sort_by(|a, b| a.raw_p.total_cmp(&b.raw_p).then(a.index.cmp(&b.index)));
    Ok(results
        .into_iter()
        .map(|r| {
            let name = r.outcome.covariate().to_string();
            let flagged = r.adjusted_p < config.alpha;
            PriorityEntry {
                flagged,
                split: r.outcome.rule().describe(&name).0,
                covariate: name,
                raw_p: r.raw_p,
                adjusted_p: r.adjusted_p,
                classification: if flagged { r.outcome.classification() } else { IssueClass::None },
                outcome: r.outcome,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateColumn, LossKind};

    fn two_labels() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    fn shifted_dataset(n: usize) -> AuditDataset {
        // Residual shifts by 1 when x > n/2; g is pure noise.
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let g: Vec<usize> = (0..n).map(|i| (i * 7 / 3) % 2).collect();
        let r: Vec<f64> = (0..n)
            .map(|i| if i > n / 2 { 1.0 } else { 0.0 } + ((i * 37 % 11) as f64 - 5.0) / 10.0)
            .collect();
        AuditDataset::build(
            vec![0.0; n],
            r,
            vec![
                CovariateColumn::continuous("x", x).unwrap(),
                CovariateColumn::nominal("g", g, two_labels()).unwrap(),
            ],
            LossKind::SquaredError,
        )
        .unwrap()
    }

    #[test]
    fn single_covariate_is_unadjusted() {
        let d = shifted_dataset(80);
        let d = AuditDataset::build(
            d.y_obs().to_vec(),
            d.y_pred().to_vec(),
            vec![d.covariates()[0].clone()],
            LossKind::SquaredError,
        )
        .unwrap();
        let cfg = AuditConfig::new(Engine::Fluctuation);
        let res = test_covariates(&d, &d.all_indices(), &cfg, 1);
        assert_eq!(res.len(), 1);
        assert_eq!(res[0].raw_p, res[0].adjusted_p);
    }

    #[test]
    fn fluctuation_tree_finds_the_step() {
        let d = shifted_dataset(200);
        let tree = grow_tree(&d, &AuditConfig::new(Engine::Fluctuation)).unwrap();
        let NodeKind::Internal { covariate, adjusted_p, outcome, .. } = &tree.root.kind else {
            panic!("root did not split")
        };
        assert_eq!(covariate, "x");
        assert!(*adjusted_p < 0.05);
        assert_eq!(outcome.rule(), &SplitRule::Threshold { value: 100.5 });
        check_partition(&tree);
    }

    #[test]
    fn permutation_tree_finds_the_step() {
        let d = shifted_dataset(120);
        let mut cfg = AuditConfig::new(Engine::Permutation);
        cfg.n_permutations = 499;
        cfg.max_depth = 2;
        // With single-observation sides allowed, extreme singletons dominate
        // the max statistic on a continuous covariate.
        cfg.min_node = 10;
        let tree = grow_tree(&d, &cfg).unwrap();
        assert_eq!(tree.split_covariates().first().map(String::as_str), Some("x"));
        check_partition(&tree);
        for leaf in tree.leaves() {
            assert!(leaf.depth <= 2);
        }
    }

    fn check_partition(tree: &AuditTree) {
        let mut seen = vec![0u8; tree.n];
        for leaf in tree.leaves() {
            leaf.indices.iter().for_each(|&i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
        for node in tree.root.walk() {
            if let NodeKind::Internal { adjusted_p, children, .. } = &node.kind {
                assert!(*adjusted_p < tree.config.alpha);
                assert_eq!(children[0].indices.len() + children[1].indices.len(), node.indices.len());
            }
        }
    }

    #[test]
    fn null_data_gives_single_leaf() {
        let n = 100;
        let r: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 10.0).collect();
        let g: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let d = AuditDataset::build(
            vec![0.0; n],
            r,
            vec![CovariateColumn::nominal("g", g, two_labels()).unwrap()],
            LossKind::SquaredError,
        )
        .unwrap();
        let tree = grow_tree(&d, &AuditConfig::new(Engine::Fluctuation)).unwrap();
        assert_eq!(tree.root.kind, NodeKind::Leaf { reason: LeafReason::NoSignificantSplit });
        assert_eq!(tree.leaves().len(), 1);
    }

    #[test]
    fn small_nodes_stop() {
        let d = shifted_dataset(15);
        let tree = grow_tree(&d, &AuditConfig::new(Engine::Fluctuation)).unwrap();
        assert_eq!(tree.root.kind, NodeKind::Leaf { reason: LeafReason::TooSmall });
    }

    #[test]
    fn priority_matches_depth_one_tree() {
        let d = shifted_dataset(150);
        let mut cfg = AuditConfig::new(Engine::Fluctuation);
        cfg.max_depth = 1;
        let tree = grow_tree(&d, &cfg).unwrap();
        let ranked = priority_audit(&d, &cfg).unwrap();
        assert_eq!(ranked.len(), 2);
        let NodeKind::Internal { covariate, raw_p, .. } = &tree.root.kind else { panic!() };
        assert_eq!(&ranked[0].covariate, covariate);
        assert_eq!(ranked[0].raw_p, *raw_p);
        assert!(ranked[0].raw_p <= ranked[1].raw_p);
        assert!(tree.root.children().unwrap().iter().all(|c| c.kind == NodeKind::Leaf { reason: LeafReason::MaxDepth }));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let d = shifted_dataset(20);
        let mut cfg = AuditConfig::new(Engine::Fluctuation);
        cfg.alpha = 1.5;
        assert!(grow_tree(&d, &cfg).is_err());
        cfg.alpha = 0.05;
        cfg.max_depth = 0;
        assert!(priority_audit(&d, &cfg).is_err());
    }

    #[test]
    fn select_prefers_declaration_order_on_ties() {
        let d = shifted_dataset(100);
        let mut res = test_covariates(&d, &d.all_indices(), &AuditConfig::new(Engine::Fluctuation), 3);
        for r in &mut res {
            r.adjusted_p = 0.01;
        }
        let (best, m) = select(res, 0.05).unwrap();
        assert_eq!((best.index, m), (0, 2));
    }
}
