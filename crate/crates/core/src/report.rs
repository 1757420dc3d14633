//! Serialized audit results and Graphviz export.
//!
//! Reports are JSON with a fixed key order, so identical runs produce
//! identical bytes and a parsed report re-serializes unchanged.

use serde::{Deserialize, Serialize};

use crate::data::{GroupStats, IssueClass};
use crate::partition::{AuditConfig, AuditNode, AuditTree, LeafReason, NodeKind, PriorityEntry, TestOutcome};
use crate::split::SplitRule;

pub const TOOL: &str = "fairtree";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `p` to three significant digits; scientific notation below 1e-4.
pub fn format_p(p: f64) -> String {
    if p == 0.0 {
        return "0".into();
    }
    if p.abs() < 1e-4 {
        return format!("{p:.2e}");
    }
    let digits = (2 - p.abs().log10().floor() as i32).max(0) as usize;
    format!("{p:.digits$}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub covariate: String,
    pub rule: SplitRule,
    pub left_condition: String,
    pub right_condition: String,
    pub raw_p: f64,
    pub adjusted_p: f64,
    pub p_display: String,
    pub n_tested: usize,
    pub classification: IssueClass,
    pub test: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub id: usize,
    pub depth: usize,
    pub stats: GroupStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf_reason: Option<LeafReason>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeReport>,
}

impl NodeReport {
    fn from_node(node: &AuditNode) -> Self {
        match &node.kind {
            NodeKind::Leaf { reason } => NodeReport {
                id: node.id,
                depth: node.depth,
                stats: node.stats,
                split: None,
                leaf_reason: Some(*reason),
                children: Vec::new(),
            },
            NodeKind::Internal { covariate, outcome, raw_p, adjusted_p, n_tested, children } => {
                let (left_condition, right_condition) = outcome.rule().describe(covariate);
                NodeReport {
                    id: node.id,
                    depth: node.depth,
                    stats: node.stats,
                    split: Some(SplitReport {
                        covariate: covariate.clone(),
                        rule: outcome.rule().clone(),
                        left_condition,
                        right_condition,
                        raw_p: *raw_p,
                        adjusted_p: *adjusted_p,
                        p_display: format_p(*adjusted_p),
                        n_tested: *n_tested,
                        classification: outcome.classification(),
                        test: outcome.clone(),
                    }),
                    leaf_reason: None,
                    children: children.iter().map(NodeReport::from_node).collect(),
                }
            }
        }
    }

    /// Pre-order traversal.
    pub fn walk(&self) -> Vec<&NodeReport> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.walk());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeReport {
    pub tool: String,
    pub version: String,
    pub mode: String,
    pub config: AuditConfig,
    pub n: usize,
    pub covariates: Vec<String>,
    pub root: NodeReport,
}

impl TreeReport {
    pub fn from_tree(tree: &AuditTree) -> Self {
        TreeReport {
            tool: TOOL.into(),
            version: VERSION.into(),
            mode: "tree".into(),
            config: tree.config,
            n: tree.n,
            covariates: tree.covariate_names.clone(),
            root: NodeReport::from_node(&tree.root),
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCovariate {
    pub rank: usize,
    pub covariate: String,
    pub raw_p: f64,
    pub adjusted_p: f64,
    pub p_display: String,
    pub flagged: bool,
    pub classification: IssueClass,
    pub split: String,
    pub test: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityReport {
    pub tool: String,
    pub version: String,
    pub mode: String,
    pub config: AuditConfig,
    pub n: usize,
    pub ranking: Vec<RankedCovariate>,
}

impl PriorityReport {
    pub fn new(entries: &[PriorityEntry], config: &AuditConfig, n: usize) -> Self {
        PriorityReport {
            tool: TOOL.into(),
            version: VERSION.into(),
            mode: "priority".into(),
            config: *config,
            n,
            ranking: entries
                .iter()
                .enumerate()
                .map(|(i, e)| RankedCovariate {
                    rank: i + 1,
                    covariate: e.covariate.clone(),
                    raw_p: e.raw_p,
                    adjusted_p: e.adjusted_p,
                    p_display: format_p(e.raw_p),
                    flagged: e.flagged,
                    classification: e.classification,
                    split: e.split.clone(),
                    test: e.outcome.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

const WORSE: &str = "#f4a6a6";
const BETTER: &str = "#b7e4c7";

/// Graphviz rendering. Internal nodes show the split covariate and adjusted
/// p; edges carry the branch conditions; leaves show group statistics and
/// are red when their mean loss exceeds the whole sample's.
pub fn export_dot(report: &TreeReport) -> String {
    let overall = report.root.stats.mean_loss;
    let mut out = String::from("digraph audit {\n  node [shape=box, style=\"rounded,filled\", fontname=\"Helvetica\"];\n");
    for node in report.root.walk() {
        let s = &node.stats;
        match &node.split {
            Some(split) => {
                let label = format!(
                    "{}\\nadj. p = {}\\n{}\\nn = {}",
                    escape(&split.covariate),
                    split.p_display,
                    split.classification,
                    s.n
                );
                out.push_str(&format!("  n{} [label=\"{}\", fillcolor=\"#e8e8e8\"];\n", node.id, label));
                for (child, cond) in node.children.iter().zip([&split.left_condition, &split.right_condition]) {
                    out.push_str(&format!("  n{} -> n{} [label=\"{}\"];\n", node.id, child.id, escape(cond)));
                }
            }
            None => {
                let worse = s.mean_loss > overall;
                let label = format!(
                    "n = {}\\nbias = {:.3}\\nvariance = {:.3}\\nloss = {:.3}",
                    s.n, s.mean_residual, s.var_residual, s.mean_loss
                );
                out.push_str(&format!(
                    "  n{} [label=\"{}\", fillcolor=\"{}\", class=\"{}\"];\n",
                    node.id,
                    label,
                    if worse { WORSE } else { BETTER },
                    if worse { "worse" } else { "better" }
                ));
            }
        }
    }
    out.push_str("}\n");
    out
}
