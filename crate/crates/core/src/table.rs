//! Result tables with a stable column order, written as CSV or JSON.
//!
//! Undefined values are written as `null` in both formats.

use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, CaseReport, MetricSummary};

/// Text written for an undefined value.
pub const NULL: &str = "null";
/// Row keys of the per-column summary rows appended to case tables.
pub const MEAN_ROW: &str = "__mean__";
pub const STD_ROW: &str = "__std__";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    /// One entry per key column.
    pub keys: Vec<String>,
    /// One entry per value column.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub key_columns: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(key_columns: Vec<String>, columns: Vec<String>) -> Self {
        Table {
            key_columns,
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, keys: Vec<String>, values: Vec<Option<f64>>) -> Result<()> {
        if keys.len() != self.key_columns.len() || values.len() != self.columns.len() {
            return Err(Error::InvalidConfig(format!(
                "row has {} keys and {} values, table has {} and {}",
                keys.len(),
                values.len(),
                self.key_columns.len(),
                self.columns.len()
            )));
        }
        self.rows.push(Row { keys, values });
        Ok(())
    }

    /// Value of `column` in the first row whose keys equal `keys`.
    pub fn get(&self, keys: &[&str], column: &str) -> Option<Option<f64>> {
        let c = self.columns.iter().position(|n| n == column)?;
        self.rows
            .iter()
            .find(|r| r.keys.iter().map(String::as_str).eq(keys.iter().copied()))
            .map(|r| r.values[c])
    }

    /// One row per case followed by `__mean__` and `__std__` rows.
    pub fn from_cases(key_column: &str, cases: &[(String, CaseReport)]) -> Result<Table> {
        let columns: Vec<String> = match cases.first() {
            Some((_, r)) => r.fields().into_iter().map(|(n, _)| n).collect(),
            None => Vec::new(),
        };
        let mut t = Table::new(vec![key_column.to_string()], columns);
        for (name, r) in cases {
            t.push(
                vec![name.clone()],
                r.fields().into_iter().map(|(_, v)| v).collect(),
            )?;
        }
        let reports: Vec<CaseReport> = cases.iter().map(|(_, r)| r.clone()).collect();
        let summary = aggregate(&reports);
        t.push(
            vec![MEAN_ROW.into()],
            summary.iter().map(|s| s.mean).collect(),
        )?;
        t.push(
            vec![STD_ROW.into()],
            summary.iter().map(|s| s.std).collect(),
        )?;
        Ok(t)
    }

    /// One row per summary: every metric's mean, then every metric's
    /// standard deviation as `<metric>_std`.
    pub fn from_summaries(
        key_columns: Vec<String>,
        rows: &[(Vec<String>, Vec<MetricSummary>)],
    ) -> Result<Table> {
        let columns: Vec<String> = match rows.first() {
            Some((_, s)) => s
                .iter()
                .map(|m| m.name.clone())
                .chain(s.iter().map(|m| format!("{}_std", m.name)))
                .collect(),
            None => Vec::new(),
        };
        let mut t = Table::new(key_columns, columns);
        for (keys, s) in rows {
            let values = s
                .iter()
                .map(|m| m.mean)
                .chain(s.iter().map(|m| m.std))
                .collect();
            t.push(keys.clone(), values)?;
        }
        Ok(t)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.key_columns.iter().chain(&self.columns))?;
        for r in &self.rows {
            let values = r.values.iter().map(|v| match v {
                Some(x) => format_value(*x),
                None => NULL.to_string(),
            });
            w.write_record(r.keys.iter().cloned().chain(values))?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    /// Array of row objects keyed by column name.
    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|r| {
                    let mut m = Map::new();
                    for (k, v) in self.key_columns.iter().zip(&r.keys) {
                        m.insert(k.clone(), Value::String(v.clone()));
                    }
                    for (k, v) in self.columns.iter().zip(&r.values) {
                        let v = v
                            .and_then(serde_json::Number::from_f64)
                            .map_or(Value::Null, Value::Number);
                        m.insert(k.clone(), v);
                    }
                    Value::Object(m)
                })
                .collect(),
        )
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| relabel_io(e, path))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_json())?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Csv(c) if c.is_io_error() => match c.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        },
        other => other,
    }
}

/// Shortest representation that parses back to the same `f64`, switching to
/// exponent notation for very large or small magnitudes.
pub fn format_value(x: f64) -> String {
    format!("{x:?}")
}
