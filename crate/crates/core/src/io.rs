//! CSV ingestion driven by a JSON schema sidecar.
//!
//! Dialect: comma separated, header row, `.` decimal mark, UTF-8. Empty
//! fields and `NA` count as missing.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AuditDataset, CovariateColumn, DataError, LossKind, Scale};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("column `{0}` is missing from the data header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    TypeParseError { row: usize, column: String, value: String },
    #[error("data file has no rows")]
    EmptyFile,
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("{0}")]
    Read(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Observed,
    Predicted,
    Loss,
    Covariate,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Scale>,
    /// Level order for ordinal covariates; optional fixed label set for
    /// nominal ones (otherwise labels are sorted).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    #[default]
    SquaredError,
    AbsoluteError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    /// Ignored when a loss column is present.
    #[serde(default)]
    pub loss: LossName,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let schema: Schema = serde_json::from_str(text).map_err(|e| IoError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    fn single(&self, role: Role) -> Result<Option<&ColumnSpec>, IoError> {
        let mut it = self.columns.iter().filter(|c| c.role == role);
        let first = it.next();
        if it.next().is_some() {
            return Err(IoError::Schema(format!("more than one {role:?} column").to_lowercase()));
        }
        Ok(first)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let observed = self.single(Role::Observed)?;
        let predicted = self.single(Role::Predicted)?;
        let loss = self.single(Role::Loss)?;
        match (observed, predicted, loss) {
            (Some(_), Some(_), _) | (None, None, Some(_)) => {}
            _ => {
                return Err(IoError::Schema(
                    "need one observed and one predicted column, or a single loss column".into(),
                ))
            }
        }
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(IoError::Schema(format!("column `{}` listed twice", c.name)));
            }
            if c.role == Role::Covariate {
                match (c.scale, &c.levels) {
                    (None, _) => return Err(IoError::Schema(format!("covariate `{}` needs a scale", c.name))),
                    (Some(Scale::Ordinal), None) => {
                        return Err(IoError::Schema(format!("ordinal covariate `{}` needs levels", c.name)))
                    }
                    (Some(Scale::Continuous), Some(_)) => {
                        return Err(IoError::Schema(format!("continuous covariate `{}` takes no levels", c.name)))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn predicted_column(&self) -> Option<&str> {
        self.columns.iter().find(|c| c.role == Role::Predicted).map(|c| c.name.as_str())
    }
}

fn read(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| IoError::Read(format!("{}: {e}", path.display())))
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema, IoError> {
    Schema::from_json(&read(path.as_ref())?)
}

pub fn load_csv(data_path: impl AsRef<Path>, schema_path: impl AsRef<Path>) -> Result<AuditDataset, IoError> {
    let schema = load_schema(schema_path)?;
    parse_csv(&read(data_path.as_ref())?, &schema)
}

/// Header plus data rows.
fn records(text: &str) -> Result<(Vec<String>, Vec<csv::StringRecord>), IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IoError::Read(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let rows = reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| IoError::Read(e.to_string()))?;
    if header.iter().all(|h| h.is_empty()) || rows.is_empty() {
        return Err(IoError::EmptyFile);
    }
    Ok((header, rows))
}

fn is_missing(field: &str) -> bool {
    field.is_empty() || field == "NA"
}

/// Parses CSV text according to `schema`. Rows are numbered from 1, header
/// excluded.
pub fn parse_csv(text: &str, schema: &Schema) -> Result<AuditDataset, IoError> {
    schema.validate()?;
    let (header, rows) = records(text)?;
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn(name.to_string()))
    };
    let field = |rec: &csv::StringRecord, col: usize, row: usize, name: &str| -> Result<String, IoError> {
        let v = rec.get(col).map(str::trim).unwrap_or("");
        if is_missing(v) {
            return Err(IoError::MissingValue { row, column: name.to_string() });
        }
        Ok(v.to_string())
    };
    let numbers = |spec: &ColumnSpec| -> Result<Vec<f64>, IoError> {
        let col = position(&spec.name)?;
        rows.iter()
            .enumerate()
            .map(|(i, rec)| {
                let v = field(rec, col, i + 1, &spec.name)?;
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or(IoError::TypeParseError { row: i + 1, column: spec.name.clone(), value: v })
            })
            .collect()
    };

    let mut covariates = Vec::new();
    for spec in schema.columns.iter().filter(|c| c.role == Role::Covariate) {
        let scale = spec.scale.expect("validated");
        let column = match scale {
            Scale::Continuous => CovariateColumn::continuous(spec.name.clone(), numbers(spec)?)?,
            Scale::Ordinal | Scale::Nominal => {
                let col = position(&spec.name)?;
                let raw: Vec<String> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, rec)| field(rec, col, i + 1, &spec.name))
                    .collect::<Result<_, _>>()?;
                let labels: Vec<String> = match &spec.levels {
                    Some(l) => l.clone(),
                    None => raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
                };
                let codes = raw
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        labels.iter().position(|l| l == v).ok_or(IoError::TypeParseError {
                            row: i + 1,
                            column: spec.name.clone(),
                            value: v.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if scale == Scale::Ordinal {
                    CovariateColumn::ordinal(spec.name.clone(), codes, labels)?
                } else {
                    CovariateColumn::nominal(spec.name.clone(), codes, labels)?
                }
            }
        };
        covariates.push(column);
    }

    let by_role = |role| schema.columns.iter().find(|c| c.role == role);
    let loss = by_role(Role::Loss).map(numbers).transpose()?;
    let dataset = match (by_role(Role::Observed), by_role(Role::Predicted)) {
        (Some(o), Some(p)) => {
            let kind = match (loss, schema.loss) {
                (Some(l), _) => LossKind::Supplied(l),
                (None, LossName::SquaredError) => LossKind::SquaredError,
                (None, LossName::AbsoluteError) => LossKind::AbsoluteError,
            };
            AuditDataset::build(numbers(o)?, numbers(p)?, covariates, kind)?
        }
        _ => {
            // Loss only: the loss doubles as the residual.
            let l = loss.expect("validated");
            AuditDataset::build(vec![0.0; l.len()], l.clone(), covariates, LossKind::Supplied(l))?
        }
    };
    Ok(dataset)
}

/// Rewrites `text` with the predicted column replaced by `y_pred`; every
/// other field is copied verbatim.
pub fn replace_predictions(text: &str, schema: &Schema, y_pred: &[f64]) -> Result<String, IoError> {
    let name = schema
        .predicted_column()
        .ok_or_else(|| IoError::Schema("schema has no predicted column".into()))?;
    let (header, rows) = records(text)?;
    let col = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IoError::MissingColumn(name.to_string()))?;
    if rows.len() != y_pred.len() {
        return Err(DataError::LengthMismatch {
            what: "predictions".into(),
            expected: rows.len(),
            got: y_pred.len(),
        }
        .into());
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| IoError::Read(e.to_string());
    writer.write_record(&header).map_err(fail)?;
    for (rec, p) in rows.iter().zip(y_pred) {
        let value = p.to_string();
        let out: Vec<&str> = rec
            .iter()
            .enumerate()
            .map(|(i, f)| if i == col { value.as_str() } else { f })
            .collect();
        writer.write_record(&out).map_err(fail)?;
    }
    let bytes = writer.into_inner().map_err(|e| IoError::Read(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("input was UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &str = r#"{
        "columns": [
            {"name": "y", "role": "observed"},
            {"name": "yhat", "role": "predicted"},
            {"name": "g", "role": "covariate", "scale": "nominal"},
            {"name": "edu", "role": "covariate", "scale": "ordinal", "levels": ["lo", "mid", "hi"]},
            {"name": "id", "role": "ignore"}
        ]
    }"#;

    #[test]
    fn smoke_ingestion() {
        let s = Schema::from_json(SCHEMA).unwrap();
        let d = parse_csv("y,yhat,g,edu,id\n1,2,b,lo,x\n2,2,a,hi,y\n3,1,b,mid,z\n", &s).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.residuals(), &[1.0, 0.0, -2.0]);
        assert_eq!(d.losses(), &[1.0, 0.0, 4.0]);
        let g = d.covariate("g").unwrap();
        assert_eq!(g.labels().unwrap(), &["a".to_string(), "b".to_string()]);
        assert_eq!(g.code(0), Some(1));
        assert_eq!(d.covariate("edu").unwrap().code(1), Some(2));
    }

    #[test]
    fn error_paths() {
        let s = Schema::from_json(SCHEMA).unwrap();
        assert_eq!(
            parse_csv("y,g,edu,id\n1,a,lo,x\n", &s),
            Err(IoError::MissingColumn("yhat".into()))
        );
        assert!(matches!(
            parse_csv("y,yhat,g,edu,id\n1,2,a,top,x\n", &s),
            Err(IoError::TypeParseError { row: 1, ref column, .. }) if column == "edu"
        ));
        assert!(matches!(
            parse_csv("y,yhat,g,edu,id\n1,2,a,lo,x\n1,abc,a,lo,x\n", &s),
            Err(IoError::TypeParseError { row: 2, .. })
        ));
        assert_eq!(
            parse_csv("y,yhat,g,edu,id\n1,,a,lo,x\n", &s),
            Err(IoError::MissingValue { row: 1, column: "yhat".into() })
        );
        assert_eq!(parse_csv("y,yhat,g,edu,id\n", &s), Err(IoError::EmptyFile));
        assert_eq!(parse_csv("", &s), Err(IoError::EmptyFile));
    }

    #[test]
    fn schema_checks() {
        let bad = |t: &str| matches!(Schema::from_json(t), Err(IoError::Schema(_)));
        assert!(bad(r#"{"columns": [{"name": "y", "role": "observed"}]}"#));
        assert!(bad(r#"{"columns": [{"name": "l", "role": "loss"}, {"name": "x", "role": "covariate"}]}"#));
        assert!(bad(
            r#"{"columns": [{"name": "l", "role": "loss"}, {"name": "x", "role": "covariate", "scale": "ordinal"}]}"#
        ));
        assert!(bad(r#"{"columns": [{"name": "l", "role": "loss"}, {"name": "l", "role": "ignore"}]}"#));
        assert!(bad("not json"));
        let s = Schema::from_json(SCHEMA).unwrap();
        assert_eq!(Schema::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn loss_only_and_supplied() {
        let s = Schema::from_json(
            r#"{"columns": [{"name": "l", "role": "loss"}, {"name": "x", "role": "covariate", "scale": "continuous"}]}"#,
        )
        .unwrap();
        let d = parse_csv("l,x\n0.5,1\n2,3\n", &s).unwrap();
        assert_eq!(d.losses(), &[0.5, 2.0]);
        assert_eq!(d.residuals(), &[0.5, 2.0]);

        let s = Schema::from_json(
            r#"{"columns": [{"name": "y", "role": "observed"}, {"name": "p", "role": "predicted"},
                {"name": "x", "role": "covariate", "scale": "continuous"}], "loss": "absolute_error"}"#,
        )
        .unwrap();
        let d = parse_csv("y,p,x\n0,-2,1\n", &s).unwrap();
        assert_eq!(d.losses(), &[2.0]);
    }

    #[test]
    fn prediction_rewrite_keeps_other_fields() {
        let s = Schema::from_json(SCHEMA).unwrap();
        let text = "y,yhat,g,edu,id\n1,2,b,lo,x\n2,2,a,hi,\"q,r\"\n";
        let out = replace_predictions(text, &s, &[2.5, 0.1]).unwrap();
        assert_eq!(out, "y,yhat,g,edu,id\n1,2.5,b,lo,x\n2,0.1,a,hi,\"q,r\"\n");
        let d = parse_csv(&out, &s).unwrap();
        assert_eq!(d.y_pred(), &[2.5, 0.1]);
        assert!(replace_predictions(text, &s, &[1.0]).is_err());
    }
}
