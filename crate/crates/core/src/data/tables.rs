//! CSV label and survival tables (UTF-8, LF line endings).
//!
//! Label table: `image_id` followed by one 0/1 column per finding, column
//! order significant. Survival table: `image_id,time_days,event`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::stats::survival::SurvivalRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    pub image_ids: Vec<u64>,
    /// Row-major `[n, n_findings]`, aligned with `image_ids`.
    pub labels: Vec<u8>,
    pub finding_names: Vec<String>,
}

impl LabelTable {
    /// Reorder rows to match `store_ids`; every store id must appear exactly
    /// once and no extra rows are allowed.
    pub fn align_to(&self, store_ids: &[u64]) -> Result<Vec<u8>> {
        use std::collections::HashMap;
        let mut by_id: HashMap<u64, usize> = HashMap::with_capacity(self.image_ids.len());
        for (i, &id) in self.image_ids.iter().enumerate() {
            if by_id.insert(id, i).is_some() {
                return Err(Error::data(format!("duplicate image id {id} in label table")));
            }
        }
        if self.image_ids.len() != store_ids.len() {
            return Err(Error::data(format!(
                "label table covers {} images, store has {}",
                self.image_ids.len(),
                store_ids.len()
            )));
        }
        let m = self.finding_names.len();
        let mut out = Vec::with_capacity(store_ids.len() * m);
        for id in store_ids {
            let Some(&row) = by_id.get(id) else {
                return Err(Error::data(format!("unknown image id {id}: not in label table")));
            };
            out.extend_from_slice(&self.labels[row * m..(row + 1) * m]);
        }
        Ok(out)
    }
}

pub fn write_labels(
    path: &Path,
    image_ids: &[u64],
    finding_names: &[String],
    labels: &[u8],
) -> Result<()> {
    let m = finding_names.len();
    if labels.len() != image_ids.len() * m {
        return Err(Error::data("label matrix size mismatch"));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["image_id".to_string()];
    header.extend(finding_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (i, id) in image_ids.iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend(labels[i * m..(i + 1) * m].iter().map(|l| l.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a label table whose columns must equal `expected_findings` in order.
pub fn read_labels(path: &Path, expected_findings: &[String]) -> Result<LabelTable> {
    let table = read_label_table(path)?;
    if table.finding_names != expected_findings {
        return Err(Error::format(format!(
            "label columns {:?} do not match expected findings {expected_findings:?}",
            table.finding_names
        )));
    }
    Ok(table)
}

/// Read a label table, taking the finding list from the header.
pub fn read_label_table(path: &Path) -> Result<LabelTable> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.is_empty() || &header[0] != "image_id" {
        return Err(Error::format("label table must start with an image_id column"));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.to_string()).collect();
    if names.is_empty() {
        return Err(Error::format("label table has no finding columns"));
    }
    let m = names.len();
    let mut image_ids = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != m + 1 {
            return Err(Error::format(format!(
                "label row {} has {} cells, expected {}",
                line + 2,
                rec.len(),
                m + 1
            )));
        }
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::format(format!("bad image id {:?}", &rec[0])))?;
        image_ids.push(id);
        for j in 1..=m {
            match &rec[j] {
                "0" => labels.push(0),
                "1" => labels.push(1),
                other => {
                    return Err(Error::format(format!(
                        "non-binary label cell {other:?} for image {id}"
                    )))
                }
            }
        }
    }
    Ok(LabelTable { image_ids, labels, finding_names: names })
}

/// Survival follow-up row as stored on disk (risk scores come from a model).
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRow {
    pub image_id: u64,
    pub time_days: f64,
    pub event: bool,
}

impl SurvivalRow {
    pub fn with_score(&self, risk_score: f64) -> SurvivalRecord {
        SurvivalRecord {
            subject_id: self.image_id,
            time: self.time_days,
            event: self.event,
            risk_score,
        }
    }
}

pub fn write_survival(path: &Path, rows: &[SurvivalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["image_id", "time_days", "event"]).map_err(csv_err)?;
    for r in rows {
        w.write_record(&[
            r.image_id.to_string(),
            format!("{}", r.time_days),
            (r.event as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_survival(path: &Path) -> Result<Vec<SurvivalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let expected = ["image_id", "time_days", "event"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format(format!(
            "survival header {:?}, expected {expected:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::format(format!("bad image id {:?}", &rec[0])))?;
        let time: f64 = rec[1]
            .parse()
            .map_err(|_| Error::format(format!("bad time {:?} at row {}", &rec[1], line + 2)))?;
        if !(time >= 0.0) {
            return Err(Error::data(format!("negative time {time} for image {id}")));
        }
        let event = match &rec[2] {
            "0" => false,
            "1" => true,
            other => return Err(Error::format(format!("event cell {other:?} must be 0 or 1"))),
        };
        rows.push(SurvivalRow { image_id: id, time_days: time, event });
    }
    if rows.is_empty() {
        return Err(Error::data("empty survival table"));
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
