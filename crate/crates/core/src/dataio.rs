//! CSV surfaces: events, static demographics and labels.
//!
//! ```text
//! events.csv   patient_id,feature,time_hours,value
//! statics.csv  patient_id,age,sex,ethnicity,diagnosis
//! labels.csv   patient_id,label
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorize::{EventRecord, StaticRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub patient_id: String,
    pub feature: String,
    pub time_hours: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub patient_id: String,
    pub label: u8,
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

fn write_rows<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_events_from<R: Read>(reader: R) -> Result<Vec<EventRow>> {
    read_rows(reader)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRow>> {
    read_rows(std::fs::File::open(path)?)
}

pub fn write_events_to<W: Write>(writer: W, rows: &[EventRow]) -> Result<()> {
    write_rows(writer, rows)
}

pub fn write_events(path: &Path, rows: &[EventRow]) -> Result<()> {
    write_rows(std::fs::File::create(path)?, rows)
}

pub fn read_statics(path: &Path) -> Result<Vec<StaticRecord>> {
    read_rows(std::fs::File::open(path)?)
}

pub fn write_statics(path: &Path, rows: &[StaticRecord]) -> Result<()> {
    write_rows(std::fs::File::create(path)?, rows)
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>> {
    let rows: Vec<LabelRow> = read_rows(std::fs::File::open(path)?)?;
    labels_to_map(rows)
}

pub fn labels_to_map(rows: Vec<LabelRow>) -> Result<BTreeMap<String, u8>> {
    let mut map = BTreeMap::new();
    for r in rows {
        if r.label > 1 {
            return Err(Error::InvalidInput(format!(
                "label of {} must be 0 or 1, got {}",
                r.patient_id, r.label
            )));
        }
        if map.insert(r.patient_id.clone(), r.label).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate label for {}",
                r.patient_id
            )));
        }
    }
    Ok(map)
}

pub fn write_labels(path: &Path, labels: &BTreeMap<String, u8>) -> Result<()> {
    let rows: Vec<LabelRow> = labels
        .iter()
        .map(|(id, &label)| LabelRow {
            patient_id: id.clone(),
            label,
        })
        .collect();
    write_rows(std::fs::File::create(path)?, &rows)
}

/// Sorted distinct feature names.
pub fn feature_vocabulary(rows: &[EventRow]) -> Vec<String> {
    rows.iter()
        .map(|r| r.feature.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Resolves feature names against a vocabulary.
pub fn rows_to_records(rows: &[EventRow], features: &[String]) -> Result<Vec<EventRecord>> {
    let index: BTreeMap<&str, usize> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_str(), i))
        .collect();
    rows.iter()
        .map(|r| {
            let feature_id =
                *index
                    .get(r.feature.as_str())
                    .ok_or_else(|| Error::OutOfVocabulary {
                        field: "feature".into(),
                        value: r.feature.clone(),
                    })?;
            Ok(EventRecord {
                patient_id: r.patient_id.clone(),
                feature_id,
                time: r.time_hours,
                value: r.value,
            })
        })
        .collect()
}

pub fn records_to_rows(records: &[EventRecord], features: &[String]) -> Vec<EventRow> {
    records
        .iter()
        .map(|e| EventRow {
            patient_id: e.patient_id.clone(),
            feature: features[e.feature_id].clone(),
            time_hours: e.time,
            value: e.value,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_round_trip_through_csv() {
        let rows = vec![
            EventRow {
                patient_id: "a".into(),
                feature: "hr".into(),
                time_hours: 0.1 + 0.2,
                value: 1.0 / 3.0,
            },
            EventRow {
                patient_id: "b".into(),
                feature: "sbp".into(),
                time_hours: 47.999,
                value: -2.5e-7,
            },
        ];
        let mut buf = Vec::new();
        write_events_to(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("patient_id,feature,time_hours,value"));
        assert_eq!(read_events_from(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn unknown_feature_name_is_reported() {
        let rows = vec![EventRow {
            patient_id: "a".into(),
            feature: "zz".into(),
            time_hours: 0.0,
            value: 0.0,
        }];
        let err = rows_to_records(&rows, &["hr".to_string()]).unwrap_err();
        assert!(err.to_string().contains("feature"));
    }

    #[test]
    fn labels_must_be_binary() {
        let rows = vec![LabelRow {
            patient_id: "a".into(),
            label: 2,
        }];
        assert!(labels_to_map(rows).is_err());
    }
}
