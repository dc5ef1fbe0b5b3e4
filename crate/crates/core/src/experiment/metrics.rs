//! Metrics sinks. CSV is long format, one row per aggregated client per
//! round, and carries no timing so identical runs give identical bytes. JSON
//! stores the records as they are.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::config::MetricsFormat;
use super::run::RoundRecord;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 8] = [
    "round",
    "client_id",
    "coefficient",
    "is_malicious",
    "test_acc",
    "test_loss",
    "proxy_loss_before",
    "proxy_loss_after",
];

#[derive(Serialize)]
struct CsvRow {
    round: usize,
    client_id: Option<usize>,
    coefficient: Option<f64>,
    is_malicious: Option<bool>,
    test_acc: Option<f64>,
    test_loss: Option<f64>,
    proxy_loss_before: Option<f64>,
    proxy_loss_after: Option<f64>,
}

fn rows(r: &RoundRecord) -> Vec<CsvRow> {
    let row = |client_id, coefficient, is_malicious| CsvRow {
        round: r.round,
        client_id,
        coefficient,
        is_malicious,
        test_acc: r.test_acc,
        test_loss: r.test_loss,
        proxy_loss_before: r.proxy_loss_before,
        proxy_loss_after: r.proxy_loss_after,
    };
    if r.client_ids.is_empty() {
        return vec![row(None, None, None)];
    }
    r.client_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let coef = r.coefficients.as_ref().map(|p| p[i]);
            row(Some(id), coef, r.malicious.get(i).copied())
        })
        .collect()
}

pub fn write_csv<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| Error::invalid(format!("csv encoding failed: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        for row in rows(r) {
            w.serialize(row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::invalid(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Writes `records` to `path`, creating parent directories.
pub fn write_metrics(records: &[RoundRecord], path: impl AsRef<Path>, format: MetricsFormat) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        MetricsFormat::Csv => write_csv(records, &mut out).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::io(path, std::io::Error::other(msg)),
            other => other,
        })?,
        MetricsFormat::Json => {
            serde_json::to_writer_pretty(&mut out, records).map_err(|e| Error::io(path, e.into()))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::io(path, e.into()))
}
