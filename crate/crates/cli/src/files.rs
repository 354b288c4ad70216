//! On-disk formats: labels and score CSVs, report directories, datasets,
//! and the artifact set a run writes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lrmr_core::canonical::{to_canonical_json, write_atomic};
use lrmr_core::evaluation::{Labels, Scores, Split};
use lrmr_core::report::{validate_report, StructuredReport};
use lrmr_core::tournament::RiskScore;
use lrmr_core::{Error, Result};
use serde_json::{json, Value};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn column(headers: &csv::StringRecord, names: &[&str], path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.contains(&h))
        .ok_or_else(|| Error::Input(format!("{}: missing column {}", path.display(), names.join(" or "))))
}

/// `patient_id,label` with binary labels and unique ids.
pub fn read_labels(path: &Path) -> Result<Labels> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let id_col = column(&headers, &["patient_id"], path)?;
    let label_col = column(&headers, &["label"], path)?;
    let mut labels = Labels::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let id = row.get(id_col).unwrap_or_default().to_string();
        let raw = row.get(label_col).unwrap_or_default();
        let label: u8 = match raw {
            "0" => 0,
            "1" => 1,
            _ => {
                return Err(Error::validation(format!(
                    "{} row {}: label {raw:?} for {id} is not 0 or 1",
                    path.display(),
                    n + 2
                )))
            }
        };
        if labels.insert(id.clone(), label).is_some() {
            return Err(Error::validation(format!("{}: duplicate patient {id}", path.display())));
        }
    }
    Ok(labels)
}

/// Reads `patient_id` and the `net` column (tournament scores) or the
/// `score` column (rule-based ablation).
pub fn read_scores(path: &Path) -> Result<Scores> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let id_col = column(&headers, &["patient_id"], path)?;
    let score_col = column(&headers, &["net", "score"], path)?;
    let mut scores = Scores::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let id = row.get(id_col).unwrap_or_default().to_string();
        let raw = row.get(score_col).unwrap_or_default();
        let value: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::validation(format!("{}: bad score {raw:?} for {id}", path.display())))?;
        if scores.insert(id.clone(), value).is_some() {
            return Err(Error::validation(format!("{}: duplicate patient {id}", path.display())));
        }
    }
    Ok(scores)
}

pub fn scores_csv(scores: &[RiskScore]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["patient_id", "wins", "losses", "comparables", "invalids", "net"])
        .map_err(io)?;
    for s in scores {
        w.write_record([
            s.patient_id.clone(),
            s.wins.to_string(),
            s.losses.to_string(),
            s.comparables.to_string(),
            s.invalids.to_string(),
            s.net.to_string(),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

pub fn rows_csv(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

pub fn read_split(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let split: Split = serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let train: BTreeSet<&String> = split.train_ids.iter().collect();
    if let Some(dup) = split.test_ids.iter().find(|id| train.contains(id)) {
        return Err(Error::validation(format!("{}: {dup} is in both train and test", path.display())));
    }
    Ok(split)
}

/// Every `*.json` in `dir`, validated and keyed by patient id. The file stem
/// must match the report's patient id.
pub fn read_reports(dir: &Path) -> Result<BTreeMap<String, StructuredReport>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    let mut reports = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let report = StructuredReport::from_json(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if stem != report.patient_id {
            return Err(Error::validation(format!(
                "{}: file name does not match patient_id {}",
                path.display(),
                report.patient_id
            )));
        }
        validate_report(&report, report.node_count)
            .into_result()
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        reports.insert(report.patient_id.clone(), report);
    }
    if reports.is_empty() {
        return Err(Error::Input(format!("{}: no report files", dir.display())));
    }
    Ok(reports)
}

/// Patient directories `dataset/{id}/nodes/`, sorted by id.
pub fn dataset_patients(dataset: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dataset).map_err(|e| Error::Input(format!("{}: {e}", dataset.display())))?;
    let mut patients = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let nodes = path.join("nodes");
        if !nodes.is_dir() {
            return Err(Error::Input(format!("{}: missing nodes/ directory", path.display())));
        }
        let id = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Input(format!("{}: patient directory name is not UTF-8", path.display())))?;
        patients.push((id.to_string(), nodes));
    }
    patients.sort();
    if patients.is_empty() {
        return Err(Error::Input(format!("{}: no patient directories", dataset.display())));
    }
    Ok(patients)
}

/// Files a command writes under its run directory, in write order.
#[derive(Debug)]
pub struct Artifacts {
    root: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    pub fn new(root: PathBuf) -> Self {
        Artifacts { root, written: Vec::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes)?;
        self.record(rel);
        Ok(path)
    }

    pub fn write_json(&mut self, rel: &str, value: &Value) -> Result<PathBuf> {
        let mut text = to_canonical_json(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Notes a file written by other means, such as the completion journal.
    pub fn record(&mut self, rel: &str) {
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
    }

    /// Writes `manifest.{command}.json` listing every recorded file. All of
    /// them must exist.
    pub fn write_manifest(&mut self, command: &str, mut body: Value) -> Result<PathBuf> {
        for rel in &self.written {
            if !self.root.join(rel).is_file() {
                return Err(Error::Data(format!("manifest names missing artifact {rel}")));
            }
        }
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        body["command"] = json!(command);
        body["artifacts"] = json!(self.written);
        body["created_unix_s"] = json!(created);
        body["tool_version"] = json!(env!("CARGO_PKG_VERSION"));
        let mut text = to_canonical_json(&body)?;
        text.push('\n');
        let path = self.root.join(format!("manifest.{command}.json"));
        fs::create_dir_all(&self.root)?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "patient_id,label\np1,1\np2, 0\n").unwrap();
        let l = read_labels(&p).unwrap();
        assert_eq!(l["p1"], 1);
        assert_eq!(l["p2"], 0);
        fs::write(&p, "patient_id,label\np1,2\n").unwrap();
        assert!(read_labels(&p).unwrap_err().to_string().contains("p1"));
        fs::write(&p, "patient_id,label\np1,1\np1,0\n").unwrap();
        assert!(read_labels(&p).unwrap_err().to_string().contains("duplicate"));
        fs::write(&p, "id,label\np1,1\n").unwrap();
        assert!(read_labels(&p).is_err());
    }

    #[test]
    fn scores_accept_net_or_score() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, scores_csv(&[RiskScore::zero("a")]).unwrap()).unwrap();
        assert_eq!(read_scores(&p).unwrap()["a"], 0.0);
        fs::write(&p, "patient_id,score\nb,7\n").unwrap();
        assert_eq!(read_scores(&p).unwrap()["b"], 7.0);
        fs::write(&p, "patient_id,score\nb,NaN\n").unwrap();
        assert!(read_scores(&p).is_err());
    }

    #[test]
    fn manifest_checks_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::new(dir.path().join("run"));
        a.write("x/y.txt", b"hi").unwrap();
        let m = a.write_manifest("test", json!({})).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!(v["artifacts"], json!(["x/y.txt"]));
        a.record("ghost.txt");
        assert!(a.write_manifest("test", json!({})).is_err());
    }
}
