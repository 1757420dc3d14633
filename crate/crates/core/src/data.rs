//! Typed containers for audited predictions.
//!
//! An [`AuditDataset`] holds observed outcomes, model predictions, the derived
//! residuals (`prediction - observation`) and per-observation losses, together
//! with the covariate columns that define candidate subgroups.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("dataset must contain at least one observation")]
    Empty,
    #[error("loss at row {row} is negative ({value})")]
    NegativeLoss { row: usize, value: f64 },
    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: String, row: usize },
    #[error("covariate `{column}` row {row}: category index {index} has no label")]
    UnknownCategoryIndex {
        column: String,
        row: usize,
        index: usize,
    },
    #[error("duplicate covariate name `{0}`")]
    DuplicateCovariate(String),
    #[error("covariate `{0}` does not exist")]
    UnknownCovariate(String),
    #[error("index set is empty")]
    EmptyGroup,
    #[error("index {0} is out of range")]
    IndexOutOfRange(usize),
    #[error("losses were supplied externally and cannot be recomputed")]
    SuppliedLoss,
}

/// Measurement scale of a covariate. Decides how split candidates are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Continuous,
    Ordinal,
    Nominal,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Continuous => "continuous",
            Scale::Ordinal => "ordinal",
            Scale::Nominal => "nominal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValues {
    Continuous(Vec<f64>),
    /// Category codes into `labels`. For ordinal columns the label order is the
    /// declared level order.
    Categorical { codes: Vec<usize>, labels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateColumn {
    name: String,
    scale: Scale,
    values: ColumnValues,
}

impl CovariateColumn {
    pub fn continuous(name: impl Into<String>, values: Vec<f64>) -> Result<Self, DataError> {
        let name = name.into();
        if let Some(row) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { what: name, row });
        }
        Ok(Self {
            name,
            scale: Scale::Continuous,
            values: ColumnValues::Continuous(values),
        })
    }

    /// Ordinal column; `labels` are listed from lowest to highest level.
    pub fn ordinal(
        name: impl Into<String>,
        codes: Vec<usize>,
        labels: Vec<String>,
    ) -> Result<Self, DataError> {
        Self::categorical(name.into(), Scale::Ordinal, codes, labels)
    }

    pub fn nominal(
        name: impl Into<String>,
        codes: Vec<usize>,
        labels: Vec<String>,
    ) -> Result<Self, DataError> {
        Self::categorical(name.into(), Scale::Nominal, codes, labels)
    }

    fn categorical(
        name: String,
        scale: Scale,
        codes: Vec<usize>,
        labels: Vec<String>,
    ) -> Result<Self, DataError> {
        if let Some(row) = codes.iter().position(|&c| c >= labels.len()) {
            return Err(DataError::UnknownCategoryIndex {
                column: name,
                row,
                index: codes[row],
            });
        }
        Ok(Self {
            name,
            scale,
            values: ColumnValues::Categorical { codes, labels },
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn values(&self) -> &ColumnValues {
        &self.values
    }

    pub fn len(&self) -> usize {
        match &self.values {
            ColumnValues::Continuous(v) => v.len(),
            ColumnValues::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[String]> {
        match &self.values {
            ColumnValues::Continuous(_) => None,
            ColumnValues::Categorical { labels, .. } => Some(labels),
        }
    }

    /// Numeric sort key of a row: the value itself for continuous columns, the
    /// level index for categorical ones.
    pub fn key(&self, row: usize) -> f64 {
        match &self.values {
            ColumnValues::Continuous(v) => v[row],
            ColumnValues::Categorical { codes, .. } => codes[row] as f64,
        }
    }

    pub fn code(&self, row: usize) -> Option<usize> {
        match &self.values {
            ColumnValues::Continuous(_) => None,
            ColumnValues::Categorical { codes, .. } => Some(codes[row]),
        }
    }

    /// Human-readable value at a row.
    pub fn display_value(&self, row: usize) -> String {
        match &self.values {
            ColumnValues::Continuous(v) => format!("{}", v[row]),
            ColumnValues::Categorical { codes, labels } => labels[codes[row]].clone(),
        }
    }

    /// Number of distinct values among `rows`.
    pub fn distinct_count(&self, rows: &[usize]) -> usize {
        match &self.values {
            ColumnValues::Continuous(v) => {
                let mut keys: Vec<f64> = rows.iter().map(|&r| v[r]).collect();
                keys.sort_by(f64::total_cmp);
                keys.dedup();
                keys.len()
            }
            ColumnValues::Categorical { codes, labels } => {
                let mut seen = vec![false; labels.len()];
                rows.iter().for_each(|&r| seen[codes[r]] = true);
                seen.iter().filter(|&&s| s).count()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    SquaredError,
    AbsoluteError,
    Supplied(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditDataset {
    y_obs: Vec<f64>,
    y_pred: Vec<f64>,
    residual: Vec<f64>,
    loss: Vec<f64>,
    loss_kind: LossKind,
    covariates: Vec<CovariateColumn>,
}

impl AuditDataset {
    pub fn build(
        y_obs: Vec<f64>,
        y_pred: Vec<f64>,
        covariates: Vec<CovariateColumn>,
        loss_kind: LossKind,
    ) -> Result<Self, DataError> {
        let n = y_obs.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        check_len("y_pred", n, y_pred.len())?;
        check_finite("y_obs", &y_obs)?;
        check_finite("y_pred", &y_pred)?;
        for (i, c) in covariates.iter().enumerate() {
            check_len(c.name(), n, c.len())?;
            if covariates[..i].iter().any(|o| o.name() == c.name()) {
                return Err(DataError::DuplicateCovariate(c.name().to_string()));
            }
        }

        let residual: Vec<f64> = y_pred.iter().zip(&y_obs).map(|(p, o)| p - o).collect();
        let loss = match &loss_kind {
            LossKind::SquaredError => residual.iter().map(|r| r * r).collect(),
            LossKind::AbsoluteError => residual.iter().map(|r| r.abs()).collect(),
            LossKind::Supplied(l) => {
                check_len("loss", n, l.len())?;
                check_finite("loss", l)?;
                if let Some(row) = l.iter().position(|&v| v < 0.0) {
                    return Err(DataError::NegativeLoss { row, value: l[row] });
                }
                l.clone()
            }
        };

        Ok(Self {
            y_obs,
            y_pred,
            residual,
            loss,
            loss_kind,
            covariates,
        })
    }

    /// Same observations and covariates with new predictions; residuals and
    /// losses are recomputed.
    pub fn with_predictions(&self, y_pred: Vec<f64>) -> Result<Self, DataError> {
        if matches!(self.loss_kind, LossKind::Supplied(_)) {
            return Err(DataError::SuppliedLoss);
        }
        Self::build(
            self.y_obs.clone(),
            y_pred,
            self.covariates.clone(),
            self.loss_kind.clone(),
        )
    }

    pub fn n(&self) -> usize {
        self.y_obs.len()
    }

    pub fn y_obs(&self) -> &[f64] {
        &self.y_obs
    }

    pub fn y_pred(&self) -> &[f64] {
        &self.y_pred
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residual
    }

    pub fn losses(&self) -> &[f64] {
        &self.loss
    }

    pub fn loss_kind(&self) -> &LossKind {
        &self.loss_kind
    }

    pub fn covariates(&self) -> &[CovariateColumn] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateColumn> {
        self.covariates.iter().find(|c| c.name() == name)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n()).collect()
    }

    /// Residual and loss summary over `indices`.
    pub fn group_stats(&self, indices: &[usize]) -> Result<GroupStats, DataError> {
        if indices.is_empty() {
            return Err(DataError::EmptyGroup);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(DataError::IndexOutOfRange(bad));
        }
        let residuals: Vec<f64> = indices.iter().map(|&i| self.residual[i]).collect();
        let mean_loss = indices.iter().map(|&i| self.loss[i]).sum::<f64>() / indices.len() as f64;
        let (mean_residual, var_residual) = mean_var(&residuals);
        Ok(GroupStats {
            n: indices.len(),
            mean_residual,
            var_residual,
            mean_loss,
        })
    }
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), DataError> {
    if expected != got {
        return Err(DataError::LengthMismatch {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

fn check_finite(what: &str, values: &[f64]) -> Result<(), DataError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(row) => Err(DataError::NonFinite {
            what: what.to_string(),
            row,
        }),
        None => Ok(()),
    }
}

/// Arithmetic mean and unbiased variance (0 for a single value).
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean_residual: f64,
    pub var_residual: f64,
    pub mean_loss: f64,
}

/// Kind of performance disparity attributed to a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IssueClass {
    Bias,
    Variance,
    Both,
    None,
}

impl IssueClass {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueClass::Bias => "Bias",
            IssueClass::Variance => "Variance",
            IssueClass::Both => "Both",
            IssueClass::None => "None",
        }
    }
}

impl std::fmt::Display for IssueClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
