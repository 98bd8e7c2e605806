//! Tables, metrics and plot scripts produced by an experiment, and their on-disk form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            // Shortest round-trip form: identical inputs give identical bytes.
            Cell::Num(v) => format!("{v}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn with_columns(name: &str, columns: Vec<String>) -> Self {
        Self { name: name.to_string(), columns, rows: Vec::new() }
    }

    /// Panics if the row width differs from the header; tables are built by pipelines, not
    /// by users.
    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn numeric_column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        self.rows
            .iter()
            .map(|r| match r[i] {
                Cell::Num(v) => Some(v),
                Cell::Int(v) => Some(v as f64),
                Cell::Text(_) => None,
            })
            .collect()
    }

    pub fn schema(&self, experiment: &str) -> String {
        format!("msda/{experiment}/{}/v{SCHEMA_VERSION}", self.name)
    }

    pub fn to_csv(&self, experiment: &str) -> Result<Vec<u8>> {
        let mut buf = format!("# schema: {}\n", self.schema(experiment)).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.columns)?;
            for row in &self.rows {
                w.write_record(row.iter().map(Cell::render))?;
            }
            w.flush()?;
        }
        Ok(buf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotScript {
    pub name: String,
    pub body: String,
}

/// Everything a pipeline produces before it touches the filesystem.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub tables: Vec<Table>,
    pub metrics: Vec<Metric>,
    pub plots: Vec<PlotScript>,
    pub notes: Vec<String>,
}

impl ExperimentOutput {
    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push(Metric { name: name.into(), value });
    }

    pub fn flag(&mut self, name: impl Into<String>, value: bool) {
        self.metric(name, if value { 1.0 } else { 0.0 });
    }

    pub fn get_metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn metrics_table(&self) -> Table {
        let mut t = Table::new("metrics", &["metric", "value"]);
        for m in &self.metrics {
            t.push(vec![m.name.as_str().into(), m.value.into()]);
        }
        t
    }
}

/// Writes every table as CSV, the metrics table, and the plot scripts into `dir`. Returns
/// the written paths in a fixed order.
pub fn write_output(dir: &Path, experiment: &str, out: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let metrics = out.metrics_table();
    for t in out.tables.iter().chain(std::iter::once(&metrics)) {
        let path = dir.join(format!("{}.csv", t.name));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, t.to_csv(experiment)?)?;
        files.push(path);
    }
    for p in &out.plots {
        let path = dir.join(format!("{}.gp", p.name));
        fs::write(&path, &p.body)?;
        files.push(path);
    }
    Ok(files)
}

/// Gnuplot preamble shared by every emitted script: comma-separated input with the schema
/// comment skipped and the header row used for titles.
pub fn gnuplot_preamble(title: &str, output_png: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Render with: gnuplot {output_png}.gp");
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set datafile commentschars '#'");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set terminal pngcairo size 900,600");
    let _ = writeln!(s, "set output '{output_png}.png'");
    let _ = writeln!(s, "set title '{title}'");
    s
}
