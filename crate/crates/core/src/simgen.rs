//! Simulated audit datasets and the study runners built on them.
//!
//! Observed scores are uniform integers 1..=4. Each prediction is the observed
//! score plus a normal error, rounded to the nearest integer, so residuals are
//! rounded errors. Affected groups get a shifted error mean (bias) or an
//! inflated error standard deviation (variance).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AuditDataset, ColumnValues, CovariateColumn, DataError, IssueClass, LossKind};
use crate::partition::{self, AuditConfig, Engine};
use crate::seed;

pub const BASE_SIGMA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovariateSpec {
    /// Categorical covariate. With `exact`, level counts are fixed at
    /// `round(p * n)` and shuffled; otherwise levels are drawn independently.
    Categorical {
        name: String,
        probs: Vec<f64>,
        exact: bool,
    },
    /// Categorical covariate whose level distribution depends on the level of
    /// an earlier categorical covariate.
    Dependent {
        name: String,
        parent: usize,
        probs_by_parent: Vec<Vec<f64>>,
    },
    Continuous { name: String, low: f64, high: f64 },
}

impl CovariateSpec {
    pub fn uniform(name: &str, levels: usize) -> Self {
        CovariateSpec::Categorical {
            name: name.to_string(),
            probs: vec![1.0 / levels as f64; levels],
            exact: false,
        }
    }

    /// Binary covariate with exactly `second` observations in level 1.
    pub fn binary_exact(name: &str, share_second: f64) -> Self {
        CovariateSpec::Categorical {
            name: name.to_string(),
            probs: vec![1.0 - share_second, share_second],
            exact: true,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            CovariateSpec::Categorical { name, .. }
            | CovariateSpec::Dependent { name, .. }
            | CovariateSpec::Continuous { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Level { covariate: usize, levels: Vec<usize> },
    Below { covariate: usize, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffectKind {
    /// Error mean becomes `-delta`.
    Bias(f64),
    /// Error standard deviation grows by `delta`.
    Variance(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    /// All conditions must hold.
    pub when: Vec<Condition>,
    pub kind: EffectKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub name: String,
    pub n: usize,
    pub covariates: Vec<CovariateSpec>,
    pub effects: Vec<Effect>,
    pub base_sigma: f64,
    /// Covariates that truly carry an effect.
    pub causes: Vec<usize>,
    /// Round predictions to the nearest integer (the default). Without
    /// rounding, residuals are the raw normal errors.
    pub round_predictions: bool,
}

impl SimScenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.base_sigma > 0.0) {
            return bad("base sigma must be positive".into());
        }
        let check_probs = |name: &str, p: &[f64]| {
            let sum: f64 = p.iter().sum();
            if p.len() < 2 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (sum - 1.0).abs() > 1e-9 {
                return Err(SimError::InvalidScenario(format!("`{name}`: proportions must lie in [0,1] and sum to 1")));
            }
            Ok(())
        };
        for (i, c) in self.covariates.iter().enumerate() {
            match c {
                CovariateSpec::Categorical { name, probs, .. } => check_probs(name, probs)?,
                CovariateSpec::Dependent { name, parent, probs_by_parent } => {
                    let parent_levels = match self.covariates.get(*parent) {
                        Some(CovariateSpec::Categorical { probs, .. }) if *parent < i => probs.len(),
                        _ => return bad(format!("`{name}`: parent must be an earlier categorical covariate")),
                    };
                    if probs_by_parent.len() != parent_levels {
                        return bad(format!("`{name}`: one distribution per parent level required"));
                    }
                    let k = probs_by_parent[0].len();
                    for p in probs_by_parent {
                        check_probs(name, p)?;
                        if p.len() != k {
                            return bad(format!("`{name}`: inconsistent level counts"));
                        }
                    }
                }
                CovariateSpec::Continuous { name, low, high } => {
                    if !(low < high) {
                        return bad(format!("`{name}`: empty range"));
                    }
                }
            }
        }
        for e in &self.effects {
            let size = match e.kind {
                EffectKind::Bias(d) | EffectKind::Variance(d) => d,
            };
            if !(size >= 0.0) {
                return bad("effect sizes must be non-negative".into());
            }
            for c in &e.when {
                let idx = match c {
                    Condition::Level { covariate, .. } | Condition::Below { covariate, .. } => *covariate,
                };
                if idx >= self.covariates.len() {
                    return bad(format!("effect refers to covariate {idx}"));
                }
            }
        }
        Ok(())
    }
}

fn draw_level(rng: &mut seed::Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn exact_levels(rng: &mut seed::Rng, probs: &[f64], n: usize) -> Vec<usize> {
    let mut codes = Vec::with_capacity(n);
    for (i, p) in probs.iter().enumerate().take(probs.len() - 1) {
        let count = ((p * n as f64).round() as usize).min(n - codes.len());
        codes.extend(std::iter::repeat(i).take(count));
    }
    codes.resize(n, probs.len() - 1);
    codes.shuffle(rng);
    codes
}

fn level_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("L{i}")).collect()
}

/// One simulated dataset for `scenario`.
pub fn gen_observations(scenario: &SimScenario, seed: u64) -> Result<AuditDataset, SimError> {
    scenario.validate()?;
    let n = scenario.n;
    let mut rng = seed::rng(seed);

    let mut columns: Vec<CovariateColumn> = Vec::with_capacity(scenario.covariates.len());
    for spec in &scenario.covariates {
        let column = match spec {
            CovariateSpec::Categorical { name, probs, exact } => {
                let codes = if *exact {
                    exact_levels(&mut rng, probs, n)
                } else {
                    (0..n).map(|_| draw_level(&mut rng, probs)).collect()
                };
                CovariateColumn::nominal(name.clone(), codes, level_labels(probs.len()))?
            }
            CovariateSpec::Dependent { name, parent, probs_by_parent } => {
                let parent_codes: Vec<usize> = (0..n).map(|i| columns[*parent].code(i).unwrap_or(0)).collect();
                let codes = parent_codes
                    .iter()
                    .map(|&p| draw_level(&mut rng, &probs_by_parent[p]))
                    .collect();
                CovariateColumn::nominal(name.clone(), codes, level_labels(probs_by_parent[0].len()))?
            }
            CovariateSpec::Continuous { name, low, high } => {
                let values = (0..n).map(|_| rng.gen_range(*low..*high)).collect();
                CovariateColumn::continuous(name.clone(), values)?
            }
        };
        columns.push(column);
    }

    let holds = |c: &Condition, row: usize| match c {
        Condition::Level { covariate, levels } => columns[*covariate]
            .code(row)
            .map_or(false, |code| levels.contains(&code)),
        Condition::Below { covariate, threshold } => columns[*covariate].key(row) < *threshold,
    };

    let mut y_obs = Vec::with_capacity(n);
    let mut y_pred = Vec::with_capacity(n);
    for row in 0..n {
        let (mut mean, mut sd) = (0.0, scenario.base_sigma);
        for effect in &scenario.effects {
            if effect.when.iter().all(|c| holds(c, row)) {
                match effect.kind {
                    EffectKind::Bias(d) => mean -= d,
                    EffectKind::Variance(d) => sd += d,
                }
            }
        }
        let obs = rng.gen_range(1..=4) as f64;
        let error = Normal::new(mean, sd).expect("positive sd").sample(&mut rng);
        y_obs.push(obs);
        let pred = obs + error;
        y_pred.push(if scenario.round_predictions { pred.round() } else { pred });
    }

    Ok(AuditDataset::build(y_obs, y_pred, columns, LossKind::SquaredError)?)
}

/// Five balanced binary covariates; only the first carries effects, applied
/// to its level 1. `minority` sets that covariate's level-1 share.
pub fn two_group_scenario(n: usize, minority: f64, effects: &[EffectKind]) -> SimScenario {
    let mut covariates = vec![CovariateSpec::binary_exact("Z1", minority)];
    for i in 2..=5 {
        covariates.push(CovariateSpec::binary_exact(&format!("Z{i}"), 0.5));
    }
    SimScenario {
        name: "two-group".into(),
        n,
        covariates,
        effects: effects
            .iter()
            .map(|&kind| Effect {
                when: vec![Condition::Level { covariate: 0, levels: vec![1] }],
                kind,
            })
            .collect(),
        base_sigma: BASE_SIGMA,
        causes: vec![0],
        round_predictions: true,
    }
}

/// The realistic-scenario suite, labelled `A` through `G`.
pub fn scenario(label: char) -> Option<SimScenario> {
    use CovariateSpec::{Continuous, Dependent};
    let cont = |name: &str, low, high| Continuous { name: name.into(), low, high };
    let uni = CovariateSpec::uniform;
    let level = |covariate, levels: &[usize]| Condition::Level { covariate, levels: levels.to_vec() };
    let bias = |when, d| Effect { when, kind: EffectKind::Bias(d) };
    let build = |name: &str, n, covariates, effects, causes| SimScenario {
        name: name.into(),
        n,
        covariates,
        effects,
        base_sigma: BASE_SIGMA,
        causes,
        round_predictions: true,
    };

    let s = match label.to_ascii_uppercase() {
        'A' => build(
            "A single cause",
            500,
            vec![uni("Gender", 2), uni("C3a", 3), uni("C3b", 3), uni("C5a", 5), uni("C5b", 5), cont("X", 0.0, 1.0)],
            vec![bias(vec![level(0, &[1])], 0.25)],
            vec![0],
        ),
        'B' => build(
            "B two causes",
            800,
            vec![uni("Gender", 2), uni("Topic", 3), uni("C5", 5), cont("X", 0.0, 1.0)],
            vec![
                bias(vec![level(0, &[1])], 0.2),
                Effect { when: vec![level(1, &[0])], kind: EffectKind::Variance(0.3) },
            ],
            vec![0, 1],
        ),
        'C' => build(
            "C continuous",
            600,
            vec![cont("Age", 13.0, 18.0), uni("Gender", 2), uni("C3", 3)],
            vec![bias(vec![Condition::Below { covariate: 0, threshold: 15.0 }], 0.3)],
            vec![0],
        ),
        'D' => build(
            "D multiclass",
            700,
            vec![uni("Topic", 8), uni("Gender", 2), uni("C3", 3)],
            vec![bias(vec![level(0, &[0, 1])], 0.3)],
            vec![0],
        ),
        'E' => build(
            "E interaction",
            800,
            vec![uni("Gender", 2), uni("Topic", 2), uni("C3", 3)],
            vec![bias(vec![level(0, &[0]), level(1, &[0])], 0.35)],
            vec![0, 1],
        ),
        'F' => build(
            "F confounding",
            600,
            vec![
                uni("Gender", 2),
                Dependent {
                    name: "Topic".into(),
                    parent: 0,
                    probs_by_parent: vec![vec![0.7, 0.15, 0.15], vec![0.15, 0.7, 0.15]],
                },
                uni("C3", 3),
            ],
            vec![bias(vec![level(1, &[0])], 0.3)],
            vec![1],
        ),
        'G' => build(
            "G small minority",
            500,
            vec![CovariateSpec::binary_exact("Native", 0.1), uni("Gender", 2), uni("C3", 3)],
            vec![bias(vec![level(0, &[1])], 0.5)],
            vec![0],
        ),
        _ => return None,
    };
    Some(s)
}

/// Counts for one simulated condition. Merging is commutative and
/// associative, so replicate order never matters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionCounts {
    pub replicates: usize,
    /// Replicates in which anything was flagged.
    pub detections: usize,
    /// Detections whose first (root) split used a true cause.
    pub root_correct: usize,
    /// Replicates whose flagged covariates are exactly the true causes.
    pub exact_correct: usize,
    /// Root verdicts, indexed Bias, Both, None, Variance.
    pub classified: [usize; 4],
}

impl ConditionCounts {
    fn merge(mut self, o: Self) -> Self {
        self.replicates += o.replicates;
        self.detections += o.detections;
        self.root_correct += o.root_correct;
        self.exact_correct += o.exact_correct;
        for i in 0..4 {
            self.classified[i] += o.classified[i];
        }
        self
    }

    pub fn power(&self) -> f64 {
        ratio(self.detections, self.replicates)
    }

    /// Share of detections naming a true cause at the root; `None` without
    /// detections.
    pub fn precision(&self) -> Option<f64> {
        (self.detections > 0).then(|| ratio(self.root_correct, self.detections))
    }

    pub fn correct_detection_rate(&self) -> f64 {
        ratio(self.exact_correct, self.replicates)
    }

    /// Share of detections that flagged exactly the true causes.
    pub fn exact_precision(&self) -> Option<f64> {
        (self.detections > 0).then(|| ratio(self.exact_correct, self.detections))
    }

    pub fn class_rate(&self, class: IssueClass) -> f64 {
        ratio(self.classified[class_slot(class)], self.replicates)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class_slot(class: IssueClass) -> usize {
    match class {
        IssueClass::Bias => 0,
        IssueClass::Both => 1,
        IssueClass::None => 2,
        IssueClass::Variance => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    /// Condition coordinates, e.g. `[("N", "500"), ("effect", "0.2")]`.
    pub labels: Vec<(String, String)>,
    pub counts: ConditionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub study: String,
    pub engine: Engine,
    pub seed: u64,
    pub conditions: Vec<ConditionResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    /// Only the root decision is simulated.
    Root,
    /// Full recursive tree.
    Tree,
}

/// Runs `replicates` datasets of `scenario` through the engine.
pub fn run_condition(
    scenario: &SimScenario,
    config: &AuditConfig,
    depth: Depth,
    replicates: usize,
    seed: u64,
) -> Result<ConditionCounts, SimError> {
    scenario.validate()?;
    (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = seed::derive(seed, rep as u64);
            let data = gen_observations(scenario, rep_seed)?;
            let mut cfg = *config;
            cfg.seed = seed::derive(rep_seed, 0x5eed);
            Ok(replicate_counts(scenario, &data, &cfg, depth))
        })
        .try_reduce(ConditionCounts::default, |a, b| Ok(a.merge(b)))
}

fn replicate_counts(scenario: &SimScenario, data: &AuditDataset, cfg: &AuditConfig, depth: Depth) -> ConditionCounts {
    let name_of = |c: &str| scenario.covariates.iter().position(|s| s.name() == c);
    let mut counts = ConditionCounts {
        replicates: 1,
        ..Default::default()
    };
    let (root, flagged) = match depth {
        Depth::Root => {
            let best = partition::evaluate_node(data, &data.all_indices(), cfg, cfg.seed);
            let flagged: Vec<usize> = best.iter().filter_map(|b| name_of(b.outcome.covariate())).collect();
            (best.map(|b| (b.outcome.covariate().to_string(), b.outcome.classification())), flagged)
        }
        Depth::Tree => {
            let tree = partition::grow_tree(data, cfg).expect("validated config");
            let flagged: Vec<usize> = tree.split_covariates().iter().filter_map(|c| name_of(c)).collect();
            let root = match &tree.root.kind {
                partition::NodeKind::Internal { covariate, outcome, .. } => {
                    Some((covariate.clone(), outcome.classification()))
                }
                partition::NodeKind::Leaf { .. } => None,
            };
            (root, flagged)
        }
    };

    match root {
        Some((covariate, class)) => {
            counts.detections = 1;
            if name_of(&covariate).map_or(false, |i| scenario.causes.contains(&i)) {
                counts.root_correct = 1;
            }
            let mut got = flagged;
            got.sort_unstable();
            got.dedup();
            let mut want = scenario.causes.clone();
            want.sort_unstable();
            if got == want {
                counts.exact_correct = 1;
            }
            counts.classified[class_slot(class)] = 1;
        }
        None => counts.classified[class_slot(IssueClass::None)] = 1,
    }
    counts
}

pub const STUDY1_SIZES: [usize; 4] = [100, 200, 500, 1000];
pub const STUDY1_EFFECTS: [f64; 6] = [0.0, 0.1, 0.15, 0.2, 0.3, 0.4];
pub const STUDY12_MINORITY: [usize; 5] = [50, 100, 150, 200, 250];
pub const STUDY2_EFFECTS: [f64; 3] = [0.15, 0.25, 0.4];

/// True issue simulated in the classification study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Truth {
    Bias,
    Both,
    Neither,
    Variance,
}

impl Truth {
    pub const ALL: [Truth; 4] = [Truth::Bias, Truth::Both, Truth::Neither, Truth::Variance];

    pub fn as_str(self) -> &'static str {
        match self {
            Truth::Bias => "Bias",
            Truth::Both => "Both",
            Truth::Neither => "Neither",
            Truth::Variance => "Variance",
        }
    }

    fn effects(self, delta: f64) -> Vec<EffectKind> {
        match self {
            Truth::Bias => vec![EffectKind::Bias(delta)],
            Truth::Variance => vec![EffectKind::Variance(delta)],
            Truth::Both => vec![EffectKind::Bias(delta), EffectKind::Variance(delta)],
            Truth::Neither => vec![],
        }
    }
}

fn labelled(pairs: &[(&str, String)], counts: ConditionCounts) -> ConditionResult {
    ConditionResult {
        labels: pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        counts,
    }
}

/// Power and precision over sample size and mean difference, five binary
/// covariates of which the first is effectual.
pub fn run_study_1(
    config: &AuditConfig,
    sizes: &[usize],
    effects: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<StudyResult, SimError> {
    let mut conditions = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        for (j, &delta) in effects.iter().enumerate() {
            let sc = two_group_scenario(n, 0.5, &[EffectKind::Bias(delta)]);
            let cond_seed = seed::derive(seed::derive(seed, i as u64), j as u64);
            let counts = run_condition(&sc, config, Depth::Root, replicates, cond_seed)?;
            conditions.push(labelled(&[("N", n.to_string()), ("effect", delta.to_string())], counts));
        }
    }
    Ok(StudyResult {
        study: "1.1".into(),
        engine: config.engine,
        seed,
        conditions,
    })
}

/// Power for unbalanced groups: `total` observations, a minority group of the
/// given sizes with a mean shift of `delta`.
pub fn run_study_1_2(
    config: &AuditConfig,
    minority: &[usize],
    total: usize,
    delta: f64,
    replicates: usize,
    seed: u64,
) -> Result<StudyResult, SimError> {
    let mut conditions = Vec::new();
    for (i, &m) in minority.iter().enumerate() {
        let share = m as f64 / total as f64;
        let sc = two_group_scenario(total, share, &[EffectKind::Bias(delta)]);
        let counts = run_condition(&sc, config, Depth::Root, replicates, seed::derive(seed, i as u64))?;
        conditions.push(labelled(
            &[("minority_prop", format!("{share:.2}")), ("minority_n", m.to_string())],
            counts,
        ));
    }
    Ok(StudyResult {
        study: "1.2".into(),
        engine: config.engine,
        seed,
        conditions,
    })
}

/// Bias/variance classification: two equal groups differing in mean, spread,
/// both or neither.
pub fn run_study_2(
    config: &AuditConfig,
    effects: &[f64],
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<StudyResult, SimError> {
    let mut conditions = Vec::new();
    for (i, &truth) in Truth::ALL.iter().enumerate() {
        for (j, &delta) in effects.iter().enumerate() {
            let sc = two_group_scenario(n, 0.5, &truth.effects(delta));
            let cond_seed = seed::derive(seed::derive(seed, 100 + i as u64), j as u64);
            let counts = run_condition(&sc, config, Depth::Root, replicates, cond_seed)?;
            conditions.push(labelled(&[("truth", truth.as_str().into()), ("effect", delta.to_string())], counts));
        }
    }
    Ok(StudyResult {
        study: "2".into(),
        engine: config.engine,
        seed,
        conditions,
    })
}

/// Realistic scenarios, full trees.
pub fn run_study_3(config: &AuditConfig, labels: &[char], replicates: usize, seed: u64) -> Result<StudyResult, SimError> {
    let mut conditions = Vec::new();
    for &label in labels {
        let sc = scenario(label).ok_or_else(|| SimError::InvalidScenario(format!("unknown scenario `{label}`")))?;
        let counts = run_condition(&sc, config, Depth::Tree, replicates, seed::derive(seed, label as u64))?;
        conditions.push(labelled(&[("scenario", sc.name.clone())], counts));
    }
    Ok(StudyResult {
        study: "3".into(),
        engine: config.engine,
        seed,
        conditions,
    })
}

/// Study-2 confusion averaged over effect sizes, per truth:
/// `(truth, [Bias, Both, Neither, Variance])`.
pub fn averaged_confusion(result: &StudyResult) -> Vec<(String, [f64; 4])> {
    let mut out: Vec<(String, [f64; 4], usize)> = Vec::new();
    for c in &result.conditions {
        let truth = c.labels.iter().find(|(k, _)| k == "truth").map(|(_, v)| v.clone()).unwrap_or_default();
        let rates = [
            c.counts.class_rate(IssueClass::Bias),
            c.counts.class_rate(IssueClass::Both),
            c.counts.class_rate(IssueClass::None),
            c.counts.class_rate(IssueClass::Variance),
        ];
        match out.iter_mut().find(|(t, _, _)| *t == truth) {
            Some((_, acc, k)) => {
                acc.iter_mut().zip(rates).for_each(|(a, r)| *a += r);
                *k += 1;
            }
            None => out.push((truth, rates, 1)),
        }
    }
    out.into_iter()
        .map(|(t, acc, k)| (t, acc.map(|a| a / k as f64)))
        .collect()
}

impl StudyResult {
    /// Delimited table, one row per condition.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.conditions.first() else {
            return out;
        };
        let keys: Vec<&str> = first.labels.iter().map(|(k, _)| k.as_str()).collect();
        let metrics: &[&str] = match self.study.as_str() {
            "2" => &["bias", "both", "neither", "variance"],
            "3" => &["detection", "correct_detection", "precision"],
            _ => &["power", "precision"],
        };
        let mut header: Vec<&str> = keys.clone();
        header.extend_from_slice(metrics);
        header.push("replicates");
        out.push_str(&header.join(","));
        out.push('\n');
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        for c in &self.conditions {
            let mut row: Vec<String> = c.labels.iter().map(|(_, v)| v.clone()).collect();
            let k = &c.counts;
            match self.study.as_str() {
                "2" => {
                    for class in [IssueClass::Bias, IssueClass::Both, IssueClass::None, IssueClass::Variance] {
                        row.push(fmt(Some(k.class_rate(class))));
                    }
                }
                "3" => {
                    row.push(fmt(Some(k.power())));
                    row.push(fmt(Some(k.correct_detection_rate())));
                    row.push(fmt(k.exact_precision()));
                }
                _ => {
                    row.push(fmt(Some(k.power())));
                    row.push(fmt(k.precision()));
                }
            }
            row.push(k.replicates.to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Predicate on one covariate. Order comparisons on categorical columns use
/// the level index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    Lt { covariate: String, value: f64 },
    Le { covariate: String, value: f64 },
    Gt { covariate: String, value: f64 },
    Ge { covariate: String, value: f64 },
    In { covariate: String, labels: Vec<String> },
}

impl Predicate {
    fn covariate(&self) -> &str {
        match self {
            Predicate::Lt { covariate, .. }
            | Predicate::Le { covariate, .. }
            | Predicate::Gt { covariate, .. }
            | Predicate::Ge { covariate, .. }
            | Predicate::In { covariate, .. } => covariate,
        }
    }

    fn holds(&self, column: &CovariateColumn, row: usize) -> bool {
        let key = column.key(row);
        match self {
            Predicate::Lt { value, .. } => key < *value,
            Predicate::Le { value, .. } => key <= *value,
            Predicate::Gt { value, .. } => key > *value,
            Predicate::Ge { value, .. } => key >= *value,
            Predicate::In { labels, .. } => match column.values() {
                ColumnValues::Categorical { codes, labels: names } => labels.contains(&names[codes[row]]),
                ColumnValues::Continuous(v) => labels.iter().any(|l| l.parse::<f64>().ok() == Some(v[row])),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaultKind {
    /// Constant added to the prediction.
    BiasOffset { offset: f64 },
    /// Normal noise added to the prediction.
    Noise {
        #[serde(default = "default_noise_sd")]
        sd: f64,
    },
}

fn default_noise_sd() -> f64 {
    DEFAULT_NOISE_SD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRule {
    /// Conjunction; an empty list matches every row.
    pub when: Vec<Predicate>,
    pub kind: FaultKind,
}

/// Default standard deviation for injected noise.
pub const DEFAULT_NOISE_SD: f64 = 0.5;

/// Copy of `dataset` with predictions altered on the rows each rule matches.
/// Rules apply in order; untouched rows keep their exact values.
pub fn inject_faults(dataset: &AuditDataset, rules: &[FaultRule], seed: u64) -> Result<AuditDataset, DataError> {
    if rules.is_empty() {
        return Ok(dataset.clone());
    }
    let mut columns = Vec::new();
    for rule in rules {
        let mut cols = Vec::new();
        for p in &rule.when {
            let col = dataset
                .covariate(p.covariate())
                .ok_or_else(|| DataError::UnknownCovariate(p.covariate().to_string()))?;
            cols.push(col);
        }
        columns.push(cols);
        let (FaultKind::Noise { sd: x } | FaultKind::BiasOffset { offset: x }) = rule.kind;
        if !x.is_finite() || (matches!(rule.kind, FaultKind::Noise { .. }) && x < 0.0) {
            return Err(DataError::NonFinite { what: "fault parameter".into(), row: 0 });
        }
    }

    let mut rng = seed::rng(seed);
    let mut y_pred = dataset.y_pred().to_vec();
    for (rule, cols) in rules.iter().zip(&columns) {
        for (row, pred) in y_pred.iter_mut().enumerate() {
            if rule.when.iter().zip(cols).all(|(p, c)| p.holds(c, row)) {
                match rule.kind {
                    FaultKind::BiasOffset { offset } => *pred += offset,
                    FaultKind::Noise { sd } => {
                        *pred += Normal::new(0.0, sd).expect("valid sd").sample(&mut rng);
                    }
                }
            }
        }
    }
    dataset.with_predictions(y_pred)
}

/// Synthetic stand-in for an income-classification test set: binary outcome,
/// a calibrated probability as prediction, and covariates `age`,
/// `hours_per_week`, `education_num` (ordinal, with mild miscalibration) and
/// `control` (a permutation of `age`).
pub fn census_standin(n: usize, seed: u64) -> Result<AuditDataset, DataError> {
    let mut rng = seed::rng(seed);
    let age: Vec<f64> = (0..n).map(|_| rng.gen_range(17..=70) as f64).collect();
    let hours: Vec<f64> = (0..n).map(|_| (20 + 5 * rng.gen_range(0..=10)) as f64).collect();
    let edu: Vec<usize> = (0..n).map(|_| rng.gen_range(0..16)).collect();
    let mut control = age.clone();
    control.shuffle(&mut rng);

    let mut y_obs = Vec::with_capacity(n);
    let mut y_pred = Vec::with_capacity(n);
    for i in 0..n {
        let logit = -1.2 + 0.2 * (edu[i] as f64 - 8.0);
        let p = 1.0 / (1.0 + (-logit).exp());
        y_obs.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
        // Under-confident at high education levels.
        y_pred.push(p - 0.01 * (edu[i] as f64 - 8.0).max(0.0));
    }
    let labels = (1..=16).map(|l| l.to_string()).collect();
    AuditDataset::build(
        y_obs,
        y_pred,
        vec![
            CovariateColumn::continuous("age", age)?,
            CovariateColumn::continuous("hours_per_week", hours)?,
            CovariateColumn::ordinal("education_num", edu, labels)?,
            CovariateColumn::continuous("control", control)?,
        ],
        LossKind::SquaredError,
    )
}

/// Bias offset of 0.35 under age 25 and noise above 55 weekly hours.
pub fn census_faults() -> Vec<FaultRule> {
    vec![
        FaultRule {
            when: vec![Predicate::Lt { covariate: "age".into(), value: 25.0 }],
            kind: FaultKind::BiasOffset { offset: 0.35 },
        },
        FaultRule {
            when: vec![Predicate::Gt { covariate: "hours_per_week".into(), value: 55.0 }],
            kind: FaultKind::Noise { sd: DEFAULT_NOISE_SD },
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_generator_moments() {
        let sc = two_group_scenario(20_000, 0.5, &[]);
        let d = gen_observations(&sc, 11).unwrap();
        let s = d.group_stats(&d.all_indices()).unwrap();
        assert!(s.mean_residual.abs() < 0.02, "{}", s.mean_residual);
        // Rounding a N(0, 0.5) error: variance is P(|e| > 0.5) ~= 0.317.
        assert!((s.var_residual - 0.3173).abs() < 0.015, "{}", s.var_residual);
        for (o, p) in d.y_obs().iter().zip(d.y_pred()) {
            assert!((1.0..=4.0).contains(o));
            assert_eq!(p.fract(), 0.0);
        }
    }

    #[test]
    fn bias_shifts_affected_group() {
        let sc = two_group_scenario(20_000, 0.5, &[EffectKind::Bias(0.4)]);
        let d = gen_observations(&sc, 5).unwrap();
        let z = d.covariate("Z1").unwrap();
        let (aff, rest): (Vec<usize>, Vec<usize>) = (0..d.n()).partition(|&i| z.code(i) == Some(1));
        assert_eq!(aff.len(), 10_000);
        let a = d.group_stats(&aff).unwrap();
        let r = d.group_stats(&rest).unwrap();
        assert!((a.mean_residual + 0.4).abs() < 0.03, "{}", a.mean_residual);
        assert!(r.mean_residual.abs() < 0.03);
    }

    #[test]
    fn generator_is_deterministic() {
        let sc = scenario('F').unwrap();
        assert_eq!(gen_observations(&sc, 3).unwrap(), gen_observations(&sc, 3).unwrap());
        assert_ne!(gen_observations(&sc, 3).unwrap(), gen_observations(&sc, 4).unwrap());
    }

    #[test]
    fn confounded_topic_follows_gender() {
        let d = gen_observations(&scenario('F').unwrap(), 9).unwrap();
        let g = d.covariate("Gender").unwrap();
        let t = d.covariate("Topic").unwrap();
        let boys: Vec<usize> = (0..d.n()).filter(|&i| g.code(i) == Some(0)).collect();
        let a = boys.iter().filter(|&&i| t.code(i) == Some(0)).count() as f64 / boys.len() as f64;
        assert!((a - 0.7).abs() < 0.08, "{a}");
    }

    #[test]
    fn invalid_scenarios() {
        let mut sc = two_group_scenario(10, 0.5, &[EffectKind::Bias(-1.0)]);
        assert!(matches!(gen_observations(&sc, 0), Err(SimError::InvalidScenario(_))));
        sc = two_group_scenario(10, 0.5, &[]);
        sc.base_sigma = 0.0;
        assert!(sc.validate().is_err());
        sc = two_group_scenario(10, 1.5, &[]);
        assert!(sc.validate().is_err());
        assert!(scenario('Q').is_none());
        for l in 'A'..='G' {
            scenario(l).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn fault_injection_rules() {
        let d = census_standin(400, 1).unwrap();
        assert_eq!(inject_faults(&d, &[], 0).unwrap(), d);

        let all = FaultRule { when: vec![], kind: FaultKind::BiasOffset { offset: 0.35 } };
        let shifted = inject_faults(&d, &[all], 0).unwrap();
        for (a, b) in shifted.y_pred().iter().zip(d.y_pred()) {
            assert_eq!(*a, b + 0.35);
        }

        let bad = FaultRule {
            when: vec![Predicate::Lt { covariate: "nope".into(), value: 1.0 }],
            kind: FaultKind::Noise { sd: 0.5 },
        };
        assert_eq!(inject_faults(&d, &[bad], 0), Err(DataError::UnknownCovariate("nope".into())));

        let parsed: Vec<FaultRule> = serde_json::from_str(
            r#"[{"when": [{"op": "lt", "covariate": "age", "value": 25}], "kind": {"type": "bias_offset", "offset": 0.35}},
                {"when": [{"op": "gt", "covariate": "hours_per_week", "value": 55}], "kind": {"type": "noise"}}]"#,
        )
        .unwrap();
        assert_eq!(parsed, census_faults());
    }

    #[test]
    fn faults_leave_other_rows_untouched() {
        let d = census_standin(2000, 2).unwrap();
        let out = inject_faults(&d, &census_faults(), 3).unwrap();
        let age = d.covariate("age").unwrap();
        let hours = d.covariate("hours_per_week").unwrap();
        for i in 0..d.n() {
            if age.key(i) >= 25.0 && hours.key(i) <= 55.0 {
                assert_eq!(out.residuals()[i].to_bits(), d.residuals()[i].to_bits());
                assert_eq!(out.losses()[i].to_bits(), d.losses()[i].to_bits());
            }
        }
    }

    #[test]
    fn noise_adds_its_variance() {
        let n = 40_000;
        let d = AuditDataset::build(
            vec![0.0; n],
            vec![0.0; n],
            vec![CovariateColumn::continuous("x", (0..n).map(|i| i as f64).collect()).unwrap()],
            LossKind::SquaredError,
        )
        .unwrap();
        let rule = FaultRule {
            when: vec![Predicate::Lt { covariate: "x".into(), value: (n / 2) as f64 }],
            kind: FaultKind::Noise { sd: 0.7 },
        };
        let out = inject_faults(&d, &[rule], 4).unwrap();
        let half: Vec<usize> = (0..n / 2).collect();
        let rest: Vec<usize> = (n / 2..n).collect();
        let v = out.group_stats(&half).unwrap().var_residual - out.group_stats(&rest).unwrap().var_residual;
        assert!((v - 0.49).abs() < 0.03, "{v}");
    }

    #[test]
    fn counts_merge_commutes() {
        let a = ConditionCounts { replicates: 3, detections: 2, root_correct: 1, exact_correct: 1, classified: [1, 0, 1, 1] };
        let b = ConditionCounts { replicates: 2, detections: 1, root_correct: 1, exact_correct: 0, classified: [0, 1, 1, 0] };
        assert_eq!(a.clone().merge(b.clone()), b.merge(a));
    }
}
