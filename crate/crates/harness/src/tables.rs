//! Posterior table files and table comparison.

use std::collections::BTreeSet;
use std::path::Path;

use dvisr_core::oracle::{PosteriorRow, PosteriorTable, TableSource};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("CSV in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("JSON in {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("tables cover different expressions; only in first: {only_first:?}; only in second: {only_second:?}")]
    RowMismatch { only_first: Vec<String>, only_second: Vec<String> },
    #[error("duplicate row {0:?}")]
    DuplicateRow(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    display: String,
    probability: f64,
}

pub fn write_csv(table: &PosteriorTable, path: &Path) -> Result<(), TableError> {
    let p = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|source| TableError::Csv { path: p.clone(), source })?;
    for r in &table.rows {
        w.serialize(CsvRow { display: r.display.clone(), probability: r.probability })
            .map_err(|source| TableError::Csv { path: p.clone(), source })?;
    }
    w.flush().map_err(|source| TableError::Io { path: p, source })
}

pub fn write_json(table: &PosteriorTable, path: &Path) -> Result<(), TableError> {
    let p = path.display().to_string();
    let text = serde_json::to_string_pretty(table).map_err(|source| TableError::Json { path: p.clone(), source })?;
    std::fs::write(path, text).map_err(|source| TableError::Io { path: p, source })
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_table(table: &PosteriorTable, dir: &Path, stem: &str) -> Result<(), TableError> {
    write_csv(table, &dir.join(format!("{stem}.csv")))?;
    write_json(table, &dir.join(format!("{stem}.json")))
}

/// Reads a table from JSON, or from a `display,probability` CSV (which
/// carries no evidence or source; `source` fills the latter).
pub fn read_table(path: &Path, source: TableSource) -> Result<PosteriorTable, TableError> {
    let p = path.display().to_string();
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|source| TableError::Io { path: p.clone(), source })?;
        return serde_json::from_str(&text).map_err(|source| TableError::Json { path: p, source });
    }
    let mut r = csv::Reader::from_path(path).map_err(|source| TableError::Csv { path: p.clone(), source })?;
    let mut rows = Vec::new();
    for rec in r.deserialize::<CsvRow>() {
        let rec = rec.map_err(|source| TableError::Csv { path: p.clone(), source })?;
        rows.push(PosteriorRow { tokens: Vec::new(), display: rec.display, probability: rec.probability });
    }
    Ok(PosteriorTable { rows, log_evidence: None, source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDelta {
    pub display: String,
    pub first: f64,
    pub second: f64,
    pub abs_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<RowDelta>,
    pub max_abs_delta: f64,
    pub tol: f64,
    pub pass: bool,
}

fn displays(t: &PosteriorTable) -> Result<BTreeSet<String>, TableError> {
    let mut set = BTreeSet::new();
    for r in &t.rows {
        if !set.insert(r.display.clone()) {
            return Err(TableError::DuplicateRow(r.display.clone()));
        }
    }
    Ok(set)
}

/// Row-by-row comparison matched on canonical display.
pub fn compare_tables(first: &PosteriorTable, second: &PosteriorTable, tol: f64) -> Result<Comparison, TableError> {
    let a = displays(first)?;
    let b = displays(second)?;
    if a != b {
        return Err(TableError::RowMismatch {
            only_first: a.difference(&b).cloned().collect(),
            only_second: b.difference(&a).cloned().collect(),
        });
    }
    let rows: Vec<RowDelta> = first
        .rows
        .iter()
        .map(|r| {
            let other = second.probability(&r.display).expect("row sets are equal");
            RowDelta { display: r.display.clone(), first: r.probability, second: other, abs_delta: (r.probability - other).abs() }
        })
        .collect();
    let max_abs_delta = rows.iter().map(|r| r.abs_delta).fold(0.0, f64::max);
    Ok(Comparison { rows, max_abs_delta, tol, pass: max_abs_delta <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, f64)]) -> PosteriorTable {
        PosteriorTable {
            rows: rows
                .iter()
                .map(|(d, p)| PosteriorRow { tokens: vec![], display: d.to_string(), probability: *p })
                .collect(),
            log_evidence: Some(-1.0),
            source: TableSource::Exact,
        }
    }

    #[test]
    fn identical_tables_have_zero_delta() {
        let t = table(&[("x_0", 0.75), ("sin(x_0)", 0.25)]);
        let c = compare_tables(&t, &t, 0.0).unwrap();
        assert_eq!(c.max_abs_delta, 0.0);
        assert!(c.pass);
    }

    #[test]
    fn order_does_not_matter_and_deltas_are_reported() {
        let a = table(&[("x_0", 0.75), ("sin(x_0)", 0.25)]);
        let b = table(&[("sin(x_0)", 0.5), ("x_0", 0.5)]);
        let c = compare_tables(&a, &b, 0.1).unwrap();
        assert_eq!(c.max_abs_delta, 0.25);
        assert!(!c.pass);
    }

    #[test]
    fn mismatched_rows_list_the_difference() {
        let a = table(&[("x_0", 1.0)]);
        let b = table(&[("c", 1.0)]);
        match compare_tables(&a, &b, 1.0) {
            Err(TableError::RowMismatch { only_first, only_second }) => {
                assert_eq!(only_first, vec!["x_0"]);
                assert_eq!(only_second, vec!["c"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_and_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(&[("x_0 * x_0", 0.36091529123456789), ("x_0", 0.6390847087654321)]);
        write_table(&t, dir.path(), "posterior_exact").unwrap();
        let from_json = read_table(&dir.path().join("posterior_exact.json"), TableSource::Variational).unwrap();
        assert_eq!(from_json, t);
        let from_csv = read_table(&dir.path().join("posterior_exact.csv"), TableSource::Exact).unwrap();
        assert_eq!(compare_tables(&t, &from_csv, 0.0).unwrap().max_abs_delta, 0.0);
    }
}
