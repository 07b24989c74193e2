//! Result rows: `model,domain,way,shot,mean,ci`, accuracies in percent.

use std::fs::{File, OpenOptions};
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

pub const HEADER: [&str; 6] = ["model", "domain", "way", "shot", "mean", "ci"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub model: String,
    pub domain: String,
    pub way: usize,
    pub shot: usize,
    /// Mean accuracy in percent.
    pub mean: f64,
    /// 95% confidence half-width in percent.
    pub ci: f64,
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append(path: &Path, rows: &[Row]) -> anyhow::Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> anyhow::Result<Vec<Row>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != HEADER {
        bail!("{} does not have the result header {}", path.display(), HEADER.join(","));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("{}: bad row {}", path.display(), i + 2)))
        .collect()
}
