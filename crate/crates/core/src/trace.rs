//! Per-round iteration records and their CSV form.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub alpha: f64,
    pub values: Vec<f64>,
}

/// Rows of `(k, α(k), values...)` for one stage with a fixed column set.
///
/// Long runs are thinned by `stride`: a round is kept when `k % stride == 0`
/// and the terminal round is always appended by the runner.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub stage: Stage,
    pub columns: Vec<String>,
    pub rows: Vec<TraceRow>,
    pub stride: usize,
}

impl IterationTrace {
    pub fn new(stage: Stage, columns: Vec<String>, stride: usize) -> Self {
        IterationTrace {
            stage,
            columns,
            rows: Vec::new(),
            stride: stride.max(1),
        }
    }

    pub fn wants(&self, k: usize) -> bool {
        k % self.stride == 0
    }

    pub fn push(&mut self, k: usize, alpha: f64, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                found: values.len(),
            });
        }
        if let Some(last) = self.rows.last() {
            if k <= last.k {
                return Err(Error::InvalidParameter(format!(
                    "trace round {k} does not follow {}",
                    last.k
                )));
            }
        }
        self.rows.push(TraceRow { k, alpha, values });
        Ok(())
    }

    /// Records the row unless it is already the last one stored.
    pub fn push_final(&mut self, k: usize, alpha: f64, values: Vec<f64>) -> Result<()> {
        if self.rows.last().is_some_and(|r| r.k == k) {
            return Ok(());
        }
        self.push(k, alpha, values)
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn header(&self) -> String {
        let mut h = String::from("stage,k,alpha");
        for c in &self.columns {
            h.push(',');
            h.push_str(c);
        }
        h
    }

    /// Shortest round-trip formatting keeps the output byte-stable.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{},{},{:?}", self.stage, row.k, row.alpha);
            for v in &row.values {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn emit_trace(trace: &IterationTrace, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(trace.to_csv().as_bytes())?;
    Ok(())
}

/// Concatenates several stage traces under a single header-per-block file.
pub fn emit_traces(traces: &[IterationTrace], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for t in traces {
        file.write_all(t.to_csv().as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_trace_is_header_only() {
        let t = IterationTrace::new(Stage::Edp, vec!["x0".into(), "residual".into()], 1);
        assert_eq!(t.to_csv(), "stage,k,alpha,x0,residual\n");
    }

    #[test]
    fn rows_must_increase() {
        let mut t = IterationTrace::new(Stage::Shedding, vec!["y0".into()], 1);
        t.push(1, 0.5, vec![1.0]).unwrap();
        assert!(t.push(1, 0.5, vec![1.0]).is_err());
        assert!(t.push(2, 0.5, vec![1.0, 2.0]).is_err());
        t.push_final(1, 0.5, vec![1.0]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.to_csv(), "stage,k,alpha,y0\nshedding,1,0.5,1.0\n");
    }

    #[test]
    fn written_file_matches_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = IterationTrace::new(Stage::Consensus, vec!["spread".into()], 10);
        assert!(t.wants(20) && !t.wants(21));
        t.push(0, 1.0, vec![0.1]).unwrap();
        emit_trace(&t, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), t.to_csv());
    }
}
