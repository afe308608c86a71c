//! Observation tables and CSV ingestion.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{LdmlError, Result};

/// Immutable rows of `(X, T, Y)` or `(X, W, T, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    covariates: Array2<f64>,
    treatment: Vec<bool>,
    outcome: Vec<f64>,
    instrument: Option<Vec<bool>>,
    covariate_names: Vec<String>,
}

impl ObservationTable {
    pub fn new(
        covariates: Array2<f64>,
        treatment: Vec<bool>,
        outcome: Vec<f64>,
        instrument: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if n == 0 {
            return Err(LdmlError::EmptyFile);
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(LdmlError::DimensionMismatch {
                expected: n,
                got: treatment.len().min(outcome.len()),
            });
        }
        if let Some(w) = &instrument {
            if w.len() != n {
                return Err(LdmlError::DimensionMismatch {
                    expected: n,
                    got: w.len(),
                });
            }
        }
        if let Some(row) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(LdmlError::NonFiniteValue {
                row,
                column: "outcome".into(),
                value: outcome[row].to_string(),
            });
        }
        if let Some((idx, v)) = covariates.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let p = covariates.ncols().max(1);
            return Err(LdmlError::NonFiniteValue {
                row: idx / p,
                column: format!("x{}", idx % p + 1),
                value: v.to_string(),
            });
        }
        let covariate_names = (1..=covariates.ncols()).map(|j| format!("x{j}")).collect();
        let covariates = covariates.as_standard_layout().into_owned();
        Ok(Self {
            covariates,
            treatment,
            outcome,
            instrument,
            covariate_names,
        })
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.p());
        self.covariate_names = names;
        self
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }

    pub fn covariate_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(i)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn instrument(&self) -> Option<&[bool]> {
        self.instrument.as_deref()
    }

    pub fn treated_count(&self) -> usize {
        self.treatment.iter().filter(|&&t| t).count()
    }

    /// Covariate rows for the given indices, in order.
    pub fn select_covariates(&self, rows: &[usize]) -> Array2<f64> {
        self.covariates.select(Axis(0), rows)
    }

    /// Swap the roles of treated and untreated units; the `Y(0)` arm of an
    /// effect is the `Y(1)` problem on the flipped table.
    pub fn with_flipped_treatment(&self) -> Self {
        let mut out = self.clone();
        out.treatment.iter_mut().for_each(|t| *t = !*t);
        out
    }

    /// Copy with `W` replaced by `1 - W`; a no-op without an instrument.
    pub fn with_flipped_instrument(&self) -> Self {
        let mut out = self.clone();
        if let Some(w) = &mut out.instrument {
            w.iter_mut().for_each(|v| *v = !*v);
        }
        out
    }
}

/// Column-name mapping for CSV ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub treatment: String,
    pub outcome: String,
    #[serde(default)]
    pub instrument: Option<String>,
    /// Covariate columns; `None` takes every remaining column in header order.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<ObservationTable> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: Read>(reader: R, schema: &ColumnSchema) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LdmlError::MissingColumn(name.to_owned()))
    };

    let t_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let w_col = schema.instrument.as_deref().map(find).transpose()?;
    let x_names: Vec<String> = match &schema.covariates {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != t_col && *j != y_col && Some(*j) != w_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let x_cols = x_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut xs = Vec::new();
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    let mut ws = w_col.map(|_| Vec::new());
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |j: usize| record.get(j).unwrap_or("");
        for (&j, name) in x_cols.iter().zip(&x_names) {
            xs.push(parse_finite(field(j), row, name)?);
        }
        ts.push(parse_flag(field(t_col), row, &schema.treatment)?);
        ys.push(parse_finite(field(y_col), row, &schema.outcome)?);
        if let (Some(j), Some(ws)) = (w_col, ws.as_mut()) {
            let name = schema.instrument.as_deref().unwrap_or_default();
            ws.push(parse_flag(field(j), row, name)?);
        }
    }
    if ys.is_empty() {
        return Err(LdmlError::EmptyFile);
    }
    let covariates = Array2::from_shape_vec((ys.len(), x_cols.len()), xs).expect("row-major buffer matches shape");
    Ok(ObservationTable::new(covariates, ts, ys, ws)?.with_covariate_names(x_names))
}

fn parse_finite(raw: &str, row: usize, column: &str) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(LdmlError::NonFiniteValue {
            row,
            column: column.to_owned(),
            value: raw.to_owned(),
        }),
    }
}

fn parse_flag(raw: &str, row: usize, column: &str) -> Result<bool> {
    match raw.parse::<f64>() {
        Ok(0.0) => Ok(false),
        Ok(1.0) => Ok(true),
        Ok(_) => Err(LdmlError::NonBinaryTreatment {
            row,
            column: column.to_owned(),
            value: raw.to_owned(),
        }),
        Err(_) => Err(LdmlError::NonFiniteValue {
            row,
            column: column.to_owned(),
            value: raw.to_owned(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> ColumnSchema {
        ColumnSchema {
            treatment: "T".into(),
            outcome: "Y".into(),
            ..Default::default()
        }
    }

    #[test]
    fn parses_three_rows() {
        let csv = "x1,T,Y\n0.5,1,2.0\n0.1,0,-1\n0.9,1,3.5\n";
        let t = load_csv_reader(csv.as_bytes(), &schema()).unwrap();
        assert_eq!((t.n(), t.p()), (3, 1));
        assert_eq!(t.treatment(), &[true, false, true]);
        assert_eq!(t.outcome(), &[2.0, -1.0, 3.5]);
        assert_eq!(t.covariate_row(2)[0], 0.9);
        assert!(t.instrument().is_none());
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let csv = "x1,T,Y\n0.5,2,2.0\n";
        let err = load_csv_reader(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, LdmlError::NonBinaryTreatment { row: 0, .. }));
    }

    #[test]
    fn rejects_missing_outcome_column() {
        let csv = "x1,T,Z\n0.5,1,2.0\n";
        let err = load_csv_reader(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, LdmlError::MissingColumn(c) if c == "Y"));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let csv = "x1,T,Y\n0.5,1,inf\n";
        let err = load_csv_reader(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, LdmlError::NonFiniteValue { .. }));
        let csv = "x1,T,Y\n";
        let err = load_csv_reader(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, LdmlError::EmptyFile));
    }

    #[test]
    fn instrument_and_explicit_covariates() {
        let csv = "a,b,W,T,Y\n1,2,1,0,0.3\n3,4,0,1,0.1\n";
        let s = ColumnSchema {
            instrument: Some("W".into()),
            covariates: Some(vec!["b".into()]),
            ..schema()
        };
        let t = load_csv_reader(csv.as_bytes(), &s).unwrap();
        assert_eq!(t.p(), 1);
        assert_eq!(t.covariate_row(1)[0], 4.0);
        assert_eq!(t.instrument().unwrap(), &[true, false]);
        assert_eq!(t.covariate_names(), &["b".to_string()]);
    }
}
