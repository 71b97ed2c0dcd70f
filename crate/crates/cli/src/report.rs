//! Run reports and the metrics table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::fit::SlopeFit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        // Seeds can exceed 2⁵³, so they are kept as text.
        Cell::Text(v.to_string())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Integers print without a fraction; other values print in the shortest
/// form that reads back to the same `f64`.
pub fn format_num(v: f64) -> String {
    if v.is_finite() && v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format_num(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width differs from the header");
        self.rows.push(row);
    }

    pub fn numbers(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flatten().filter_map(|c| match c {
            Cell::Num(v) => Some(*v),
            Cell::Text(_) => None,
        })
    }

    /// RFC 4180 CSV with a header row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub name: String,
    #[serde(flatten)]
    pub fit: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Rule {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Rule {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub pass: bool,
    pub rules: Vec<Rule>,
    pub fits: Vec<NamedFit>,
    pub metrics: Table,
    /// Extra files written next to `metrics.csv`.
    pub artifacts: Vec<String>,
}

/// A finished run, ready to be written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub extras: Vec<(String, String)>,
    pub plot: Option<crate::plot::PlotSpec>,
}

impl RunOutput {
    /// Writes `report.json`, `metrics.csv`, `plot.svg` when a plot applies,
    /// and the extra artifacts.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let csv = self.report.metrics.to_csv()?;
        std::fs::write(dir.join("metrics.csv"), &csv)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        if let Some(spec) = &self.plot {
            let svg = crate::plot::render_svg(&csv, spec)?;
            std::fs::write(dir.join("plot.svg"), svg)?;
        }
        for (name, text) in &self.extras {
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_and_formats() {
        let mut t = Table::new(&["name", "value", "seed"]);
        t.push(vec!["a,b".into(), 0.1.into(), 7u64.into()]);
        t.push(vec!["say \"hi\"".into(), 64.0.into(), u64::MAX.into()]);
        t.push(vec!["tiny".into(), 1e-20.into(), 0u64.into()]);
        let csv = t.to_csv().unwrap();
        assert_eq!(
            csv,
            "name,value,seed\n\"a,b\",0.1,7\n\"say \"\"hi\"\"\",64,18446744073709551615\ntiny,1e-20,0\n"
        );
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 123.0] {
            assert_eq!(format_num(v).parse::<f64>().unwrap(), v);
        }
    }
}
