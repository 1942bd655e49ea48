//! CSV metric logs with a fixed header and monotone steps.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    last_step: Option<usize>,
}

pub const QUANTIZER_COLUMNS: [&str; 10] = [
    "step",
    "loss",
    "recon_l1",
    "commitment",
    "codebook_loss",
    "usage_q1",
    "usage_q2",
    "usage_q3",
    "usage_q4",
    "wall_time",
];

pub const LM_COLUMNS: [&str; 10] = [
    "step",
    "loss",
    "vb",
    "eos",
    "b_diagnostic",
    "usage_q1",
    "usage_q2",
    "usage_q3",
    "usage_q4",
    "wall_time",
];

pub const COMPARE_COLUMNS: [&str; 7] =
    ["arm", "step", "depth", "usage", "perplexity", "recon_l1", "wall_time"];

/// Cell formatting shared by every log; `f64` uses the shortest exact form.
pub enum Cell {
    Int(usize),
    Float(f64),
    Text(String),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl MetricsLog {
    pub fn new(header: &[&'static str]) -> Self {
        MetricsLog {
            header: header.to_vec(),
            rows: Vec::new(),
            last_step: None,
        }
    }

    /// Appends a row. `step` must not decrease.
    pub fn push(&mut self, step: usize, cells: Vec<Cell>) -> Result<()> {
        if cells.len() != self.header.len() {
            return Err(Error::usage("metrics row does not match the header"));
        }
        if self.last_step.is_some_and(|s| step < s) {
            return Err(Error::usage("metrics steps must be monotone"));
        }
        self.last_step = Some(step);
        self.rows.push(
            cells
                .into_iter()
                .map(|c| match c {
                    Cell::Int(v) => v.to_string(),
                    Cell::Float(v) => format!("{v:?}"),
                    Cell::Text(s) => s,
                })
                .collect(),
        );
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| *h == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join(","));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}
