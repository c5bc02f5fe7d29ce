use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::EvalReport;
use crate::perturb::Perturbation;

pub const CSV_HEADER: [&str; 6] = ["model", "perturbation", "param", "accuracy", "n", "seed"];

/// One CSV row. `accuracy` carries the 4-decimal value that was written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    pub model: String,
    pub perturbation: String,
    pub param: f64,
    pub accuracy: f64,
    pub n: usize,
    pub seed: u64,
}

pub(crate) fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Rows in output order: perturbation kind, then ascending parameter.
pub fn records(report: &EvalReport) -> Vec<CsvRecord> {
    let mut cells: Vec<_> = report.cells.iter().collect();
    cells.sort_by(|a, b| {
        (a.perturbation.kind_rank())
            .cmp(&b.perturbation.kind_rank())
            .then(a.perturbation.param().total_cmp(&b.perturbation.param()))
    });
    cells
        .into_iter()
        .map(|c| CsvRecord {
            model: report.model_id.clone(),
            perturbation: c.perturbation.kind().to_string(),
            param: c.perturbation.param(),
            accuracy: round4(c.accuracy()),
            n: c.n,
            seed: c.seed,
        })
        .collect()
}

pub fn csv_string(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(CSV_HEADER).map_err(ser)?;
    for r in records(report) {
        w.write_record([
            r.model,
            r.perturbation,
            r.param.to_string(),
            format!("{:.4}", r.accuracy),
            r.n.to_string(),
            r.seed.to_string(),
        ])
        .map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

pub fn report_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, csv_string(report)?).map_err(|e| Error::io(path, e))
}

/// Parses text written by [`csv_string`].
pub fn parse_csv(text: &str) -> Result<Vec<CsvRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Serde(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Serde(format!("unexpected CSV header {:?}", header)));
    }
    let records: Vec<CsvRecord> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Serde(e.to_string()))?;
    for rec in &records {
        Perturbation::from_kind(&rec.perturbation, rec.param)?;
    }
    Ok(records)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}
