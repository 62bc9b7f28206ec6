//! Result tables and the files they are written to.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};

/// Cell of a result table. Floats are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) => format!("{v}"),
            Cell::Int(v) => v.to_string(),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
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
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Plot-ready long table with `series,x,y,yerr` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    table: Table,
}

impl Default for PlotData {
    fn default() -> Self {
        Self {
            table: Table::new(&["series", "x", "y", "yerr"]),
        }
    }
}

impl PlotData {
    pub fn add(&mut self, series: &str, x: &[f64], y: &[f64], yerr: Option<&[f64]>) {
        for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
            let e = yerr.map_or(0.0, |e| e[i]);
            self.table.push(vec![series.into(), xi.into(), yi.into(), e.into()]);
        }
    }

    pub fn table(&self) -> &Table {
        &self.table
    }
}

/// Everything an experiment produces.
#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub table: Table,
    pub plot: Option<PlotData>,
    /// Experiment-specific summary placed in the metadata sidecar.
    pub summary: Value,
}

impl ResultBundle {
    pub fn new(table: Table, summary: impl Serialize) -> Self {
        Self {
            table,
            plot: None,
            summary: serde_json::to_value(summary).expect("summary serializes"),
        }
    }

    pub fn with_plot(mut self, plot: PlotData) -> Self {
        self.plot = Some(plot);
        self
    }
}

/// Paths of the files written for one run.
#[derive(Debug, Clone, Serialize)]
pub struct WrittenFiles {
    pub csv: PathBuf,
    pub metadata: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plot: Option<PathBuf>,
}

pub fn check_stem(stem: &str) -> Result<()> {
    let ok = !stem.is_empty()
        && stem != "."
        && stem != ".."
        && !stem.contains(['/', '\\'])
        && !stem.chars().any(char::is_control);
    if ok {
        Ok(())
    } else {
        Err(CliError::invalid("output.stem", format!("`{stem}` is not a plain file name")))
    }
}

/// Writes `<stem>.csv`, `<stem>_plot.csv` and `<stem>.json` under `dir`.
pub fn write_bundle(
    dir: &Path,
    stem: &str,
    bundle: &ResultBundle,
    write_plot: bool,
    metadata: impl FnOnce(&WrittenFiles) -> Value,
) -> Result<WrittenFiles> {
    check_stem(stem)?;
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let files = WrittenFiles {
        csv: dir.join(format!("{stem}.csv")),
        metadata: dir.join(format!("{stem}.json")),
        plot: (write_plot && bundle.plot.is_some()).then(|| dir.join(format!("{stem}_plot.csv"))),
    };
    write_file(&files.csv, &bundle.table.to_csv())?;
    if let (Some(path), Some(plot)) = (&files.plot, &bundle.plot) {
        write_file(path, &plot.table().to_csv())?;
    }
    let mut json = serde_json::to_string_pretty(&metadata(&files)).expect("metadata serializes");
    json.push('\n');
    write_file(&files.metadata, json.as_bytes())?;
    Ok(files)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_uses_lf_and_round_trip_floats() {
        let mut t = Table::new(&["x", "ok"]);
        t.push(vec![0.1.into(), true.into()]);
        t.push(vec![(1.0 / 3.0).into(), false.into()]);
        let text = String::from_utf8(t.to_csv()).unwrap();
        assert_eq!(text, "x,ok\n0.1,true\n0.3333333333333333,false\n");
    }

    #[test]
    fn stems_cannot_escape_the_output_dir() {
        assert!(check_stem("ramsey").is_ok());
        for bad in ["", "..", "a/b", "..\\x"] {
            assert!(check_stem(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn plot_rows_carry_series_name() {
        let mut p = PlotData::default();
        p.add("data", &[0.0, 1.0], &[0.5, 0.25], None);
        let text = String::from_utf8(p.table().to_csv()).unwrap();
        assert_eq!(text, "series,x,y,yerr\ndata,0,0.5,0\ndata,1,0.25,0\n");
    }
}
