//! Raw recording ingestion: line-delimited JSON and telemetry CSV.
//!
//! Each JSON line is one record tagged by `kind`:
//!
//! ```text
//! {"kind":"csi","device_id":"uav-00","timestamp":0.05,"phases":[...],"subcarrier_indices":[...]}
//! {"kind":"telemetry","device_id":"uav-00","timestamp":0.1,"pitch":0.4,"roll":-1.2,...}
//! ```
//!
//! Telemetry records may carry extra numeric keys; only the eight
//! fingerprint fields are kept. The DC subcarrier is removed on ingestion.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use securelink_core::signal::{self, CsiMeasurement, TelemetryField, TelemetryFrame};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RawRecord {
    Csi {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device_id: Option<String>,
        timestamp: f64,
        phases: Vec<f64>,
        subcarrier_indices: Vec<i32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rssi_dbm: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise_dbm: Option<f64>,
    },
    Telemetry {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device_id: Option<String>,
        timestamp: f64,
        #[serde(flatten)]
        fields: BTreeMap<String, f64>,
    },
}

impl RawRecord {
    pub fn from_csi(device_id: Option<&str>, m: &CsiMeasurement) -> Self {
        RawRecord::Csi {
            device_id: device_id.map(String::from),
            timestamp: m.timestamp,
            phases: m.phases.clone(),
            subcarrier_indices: m.subcarrier_indices.clone(),
            rssi_dbm: m.rssi_dbm,
            noise_dbm: m.noise_dbm,
        }
    }

    pub fn from_telemetry(device_id: Option<&str>, f: &TelemetryFrame) -> Self {
        let fields = TelemetryField::ALL
            .iter()
            .map(|k| (k.key().to_string(), f.get(*k)))
            .collect();
        RawRecord::Telemetry {
            device_id: device_id.map(String::from),
            timestamp: f.timestamp,
            fields,
        }
    }
}

/// Both streams of one device, sorted by timestamp.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recording {
    pub csi: Vec<CsiMeasurement>,
    pub telemetry: Vec<TelemetryFrame>,
}

impl Recording {
    fn sort(&mut self) {
        self.csi.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        self.telemetry.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
}

/// Recordings keyed by device id; records without an id share the `None` key.
pub type Recordings = BTreeMap<Option<String>, Recording>;

fn parse_error(path: &Path, line: usize, message: impl ToString) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Reads a JSONL recording. Errors carry the 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Recordings> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Recordings::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| parse_error(path, line_no, e))?;
        match record {
            RawRecord::Csi {
                device_id,
                timestamp,
                phases,
                subcarrier_indices,
                rssi_dbm,
                noise_dbm,
            } => {
                let m = CsiMeasurement {
                    timestamp,
                    phases,
                    subcarrier_indices,
                    rssi_dbm,
                    noise_dbm,
                }
                .without_dc();
                m.validate().map_err(|e| parse_error(path, line_no, e))?;
                out.entry(device_id).or_default().csi.push(m);
            }
            RawRecord::Telemetry {
                device_id,
                timestamp,
                mut fields,
            } => {
                fields.insert("timestamp".into(), timestamp);
                let frame = signal::select_telemetry_fields(fields.iter().map(|(k, v)| (k.as_str(), *v)), "timestamp")
                    .map_err(|e| parse_error(path, line_no, e))?;
                out.entry(device_id).or_default().telemetry.push(frame);
            }
        }
    }
    for rec in out.values_mut() {
        rec.sort();
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, recordings: &Recordings) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, rec) in recordings {
        let id = id.as_deref();
        let records = rec
            .csi
            .iter()
            .map(|m| RawRecord::from_csi(id, m))
            .chain(rec.telemetry.iter().map(|f| RawRecord::from_telemetry(id, f)));
        for r in records {
            serde_json::to_writer(&mut w, &r).map_err(|e| CliError::io(path, e.into()))?;
            w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Column names of a telemetry CSV, per canonical field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvMapping {
    pub timestamp: String,
    pub columns: [String; TelemetryField::COUNT],
}

impl CsvMapping {
    /// Columns named after the canonical keys.
    pub fn canonical() -> Self {
        CsvMapping {
            timestamp: "timestamp".into(),
            columns: TelemetryField::ALL.map(|f| f.key().to_string()),
        }
    }

    /// Tello SDK state-string keys (`agx`, `agy`, `agz` for acceleration).
    pub fn tello() -> Self {
        let mut m = Self::canonical();
        m.columns[TelemetryField::AccX.index()] = "agx".into();
        m.columns[TelemetryField::AccY.index()] = "agy".into();
        m.columns[TelemetryField::AccZ.index()] = "agz".into();
        m
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "canonical" => Some(Self::canonical()),
            "tello" => Some(Self::tello()),
            _ => None,
        }
    }
}

/// Reads telemetry frames from a CSV with a header row.
pub fn read_telemetry_csv(path: &Path, mapping: &CsvMapping) -> Result<Vec<TelemetryFrame>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| parse_error(path, 1, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_error(path, 1, format!("missing column `{name}`")))
    };
    let ts_col = find(&mapping.timestamp)?;
    let cols = mapping.columns.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| parse_error(path, line, e))?;
        let get = |i: usize| -> Result<f64> {
            let raw = row.get(i).unwrap_or("").trim();
            raw.parse()
                .map_err(|_| parse_error(path, line, format!("`{raw}` is not a number")))
        };
        let mut values = [0.0; TelemetryField::COUNT];
        for (v, &c) in values.iter_mut().zip(&cols) {
            *v = get(c)?;
        }
        frames.push(TelemetryFrame {
            timestamp: get(ts_col)?,
            values,
        });
    }
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(frames)
}
