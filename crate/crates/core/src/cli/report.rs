//! Report, CSV and manifest output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{items_csv, EvalReport, ItemScore};

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_file(path, &text)
}

/// `<stem>.json` with the report, `<stem>.csv` with per-item scores and
/// `<stem>-histograms.csv` with one row per (result, bin).
pub fn write_report(report: &EvalReport, items: &[ItemScore], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    let hist = dir.join(format!("{stem}-histograms.csv"));
    write_json(&json, report)?;
    write_file(&csv, items_csv(items).as_bytes())?;
    write_file(&hist, histogram_csv(report).as_bytes())?;
    Ok(vec![json, csv, hist])
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn histogram_csv(report: &EvalReport) -> String {
    let mut s = String::from("result,bin,lower,upper,normal,anomalous\n");
    for (label, r) in &report.results {
        let h = &r.histogram;
        for b in 0..h.normal.len() {
            s.push_str(&format!(
                "{label},{b},{:e},{:e},{},{}\n",
                h.edges[b],
                h.edges[b + 1],
                h.normal[b],
                h.anomalous[b]
            ));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub config_digest: String,
    pub seeds: Vec<(String, u64)>,
    /// Output file (relative to the run directory) and its SHA-256.
    pub files: Vec<(String, String)>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &str, config_digest: String, seeds: Vec<(String, u64)>) -> Self {
        Manifest {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest,
            seeds,
            files: Vec::new(),
        }
    }

    pub fn record(&mut self, dir: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let rel = f.strip_prefix(dir).unwrap_or(f).display().to_string();
            self.files.push((rel, file_digest(f)?));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join("manifest.json");
        write_json(&p, self)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{histogram, AttackResult};

    #[test]
    fn report_round_trip() {
        let mut r = EvalReport::new(vec![3]);
        r.insert(AttackResult {
            label: "clean".into(),
            attack: None,
            auroc: 0.8125,
            fpr_at_95_tpr: 0.1 + 0.2,
            latent_stability: Some(1.0 / 3.0),
            histogram: histogram(&[0.1, 0.2], &[0.3], 50),
        });
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&r, &[], dir.path(), "eval").unwrap();
        assert_eq!(read_report(&files[0]).unwrap(), r);
        let hist = fs::read_to_string(&files[2]).unwrap();
        assert_eq!(hist.lines().count(), 51);
    }
}
