//! Report envelope and CSV tables.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use weakloc_core::{ConstantsLedger, REPORT_SCHEMA};

use crate::config::{Format, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), pass, detail: detail.into() }
    }
}

/// Two-column plot table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: [&'static str; 2],
    pub rows: Vec<(f64, f64)>,
}

impl Table {
    pub fn new(file: impl Into<String>, header: [&'static str; 2], rows: Vec<(f64, f64)>) -> Self {
        Table { file: file.into(), header, rows }
    }
}

/// Per-instance table with an arbitrary header.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub file: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

/// Everything a subcommand produces.
#[derive(Debug)]
pub struct Outcome {
    pub result: serde_json::Value,
    pub checks: Vec<Check>,
    pub ledger: ConstantsLedger,
    pub tables: Vec<Table>,
    pub raw: Vec<RawTable>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    schema: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    ledger: &'a ConstantsLedger,
    checks: &'a [Check],
    pass: bool,
    result: &'a serde_json::Value,
}

pub fn envelope_json(command: &str, cfg: &RunConfig, outcome: &Outcome) -> String {
    let env = Envelope {
        schema: REPORT_SCHEMA,
        command,
        seed: cfg.experiment.seed,
        config: cfg,
        ledger: &outcome.ledger,
        checks: &outcome.checks,
        pass: outcome.pass(),
        result: &outcome.result,
    };
    let mut s = serde_json::to_string_pretty(&env).expect("report is serialisable");
    s.push('\n');
    s
}

fn csv_error(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn write_table(dir: &Path, table: &Table) -> io::Result<()> {
    let mut w = csv::Writer::from_path(dir.join(&table.file)).map_err(csv_error)?;
    w.write_record(table.header).map_err(csv_error)?;
    for (a, b) in &table.rows {
        w.write_record([a.to_string(), b.to_string()]).map_err(csv_error)?;
    }
    w.flush()
}

pub fn write_raw(dir: &Path, table: &RawTable) -> io::Result<()> {
    let mut w = csv::Writer::from_path(dir.join(&table.file)).map_err(csv_error)?;
    w.write_record(&table.header).map_err(csv_error)?;
    for row in &table.rows {
        w.write_record(row).map_err(csv_error)?;
    }
    w.flush()
}

pub fn write_summary(dir: &Path, checks: &[Check]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_error)?;
    w.write_record(["check", "status", "detail"]).map_err(csv_error)?;
    for c in checks {
        w.write_record([c.name.as_str(), if c.pass { "PASS" } else { "FAIL" }, c.detail.as_str()]).map_err(csv_error)?;
    }
    w.flush()
}

/// Writes report.json, ledger.json, summary.csv and the tables into `dir`.
pub fn write_all(dir: &Path, command: &str, cfg: &RunConfig, outcome: &Outcome) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let formats = &cfg.output.formats;
    if formats.contains(&Format::Json) {
        fs::write(dir.join("report.json"), envelope_json(command, cfg, outcome))?;
        let mut ledger = serde_json::to_string_pretty(&outcome.ledger).expect("ledger is serialisable");
        ledger.push('\n');
        fs::write(dir.join("ledger.json"), ledger)?;
    }
    write_summary(dir, &outcome.checks)?;
    if formats.contains(&Format::Csv) {
        for t in &outcome.tables {
            write_table(dir, t)?;
        }
        for t in &outcome.raw {
            write_raw(dir, t)?;
        }
    }
    Ok(())
}
