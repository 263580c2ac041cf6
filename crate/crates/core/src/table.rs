//! Numeric view of a cohort: one row per observation, one column per feature.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cohort::FeatureKind;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub subject_id: String,
    pub visit: u32,
}

/// Encoded feature matrix with an explicit missingness mask.
///
/// Cells flagged in `missing` hold `NaN` in `data`; the mask is authoritative.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericTable {
    pub names: Vec<String>,
    pub kinds: Vec<FeatureKind>,
    /// Number of levels for discrete columns (2 for binary), 0 for continuous.
    pub n_levels: Vec<usize>,
    pub data: DMatrix<f64>,
    pub missing: DMatrix<bool>,
    pub keys: Vec<RowKey>,
    pub outcome: Vec<bool>,
}

impl NumericTable {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_complete(&self) -> bool {
        !self.missing.iter().any(|&m| m)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> NumericTable {
        NumericTable {
            names: cols.iter().map(|&c| self.names[c].clone()).collect(),
            kinds: cols.iter().map(|&c| self.kinds[c]).collect(),
            n_levels: cols.iter().map(|&c| self.n_levels[c]).collect(),
            data: self.data.select_columns(cols),
            missing: self.missing.select_columns(cols),
            keys: self.keys.clone(),
            outcome: self.outcome.clone(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> NumericTable {
        NumericTable {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            n_levels: self.n_levels.clone(),
            data: self.data.select_rows(rows),
            missing: self.missing.select_rows(rows),
            keys: rows.iter().map(|&r| self.keys[r].clone()).collect(),
            outcome: rows.iter().map(|&r| self.outcome[r]).collect(),
        }
    }

    /// Appends a fully observed column.
    pub fn push_column(&mut self, name: String, kind: FeatureKind, n_levels: usize, values: &[f64]) {
        let n = self.nrows();
        assert_eq!(values.len(), n);
        let p = self.ncols();
        let mut data = self.data.clone().insert_column(p, 0.0);
        data.column_mut(p).copy_from_slice(values);
        self.data = data;
        self.missing = self.missing.clone().insert_column(p, false);
        self.names.push(name);
        self.kinds.push(kind);
        self.n_levels.push(n_levels);
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "visit".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("outcome".into());
        out.write_record(&header)?;
        for i in 0..self.nrows() {
            let mut rec = vec![self.keys[i].subject_id.clone(), self.keys[i].visit.to_string()];
            for j in 0..self.ncols() {
                rec.push(if self.missing[(i, j)] { String::new() } else { self.data[(i, j)].to_string() });
            }
            rec.push(if self.outcome[i] { "1" } else { "0" }.into());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}
