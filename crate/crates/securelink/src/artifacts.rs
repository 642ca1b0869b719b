//! On-disk artifacts: sample files, checkpoints, registries and reports.
//!
//! Every artifact embeds the effective configuration that produced it.
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! saved and reloaded artifact is bit-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use securelink_core::fusion::{FusionConfig, FusionModel, FusionParams, FusionStats};
use securelink_core::harness::EvalReport;
use securelink_core::metric::TrainHistory;
use securelink_core::ocsvm::UavRegistry;
use securelink_core::signal::AlignedSample;

use crate::error::{CliError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const REGISTRY_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

fn format_error(path: &Path, message: impl ToString) -> CliError {
    CliError::Format {
        path: path.into(),
        message: message.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| format_error(path, e))?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads JSON; a missing file is reported as a missing prerequisite.
pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            CliError::MissingPrerequisite(format!("{what} {} does not exist", path.display()))
        }
        _ => CliError::io(path, e),
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| format_error(path, e))
}

/// One line of a sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(flatten)]
    pub sample: AlignedSample,
    /// Identity an impostor sample claims; absent for genuine samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed_id: Option<String>,
}

impl From<AlignedSample> for SampleRecord {
    fn from(sample: AlignedSample) -> Self {
        SampleRecord {
            sample,
            claimed_id: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: serde_json::Value,
}

/// Sample files are JSONL: a `{"meta": ...}` header line, then one sample per line.
pub fn write_samples(path: &Path, meta: &serde_json::Value, records: &[SampleRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |v: &dyn erased::Json| -> Result<()> {
        v.write(&mut w).map_err(|e| format_error(path, e))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))
    };
    line(&MetaLine { meta: meta.clone() })?;
    for r in records {
        line(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

mod erased {
    pub trait Json {
        fn write(&self, w: &mut dyn std::io::Write) -> serde_json::Result<()>;
    }

    impl<T: serde::Serialize> Json for T {
        fn write(&self, w: &mut dyn std::io::Write) -> serde_json::Result<()> {
            serde_json::to_writer(w, self)
        }
    }
}

pub struct SampleFile {
    pub meta: Option<serde_json::Value>,
    pub records: Vec<SampleRecord>,
}

impl SampleFile {
    pub fn samples(&self) -> Vec<AlignedSample> {
        self.records.iter().map(|r| r.sample.clone()).collect()
    }
}

pub fn read_samples(path: &Path) -> Result<SampleFile> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            CliError::MissingPrerequisite(format!("sample file {} does not exist", path.display()))
        }
        _ => CliError::io(path, e),
    })?;
    let mut meta = None;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| CliError::Parse {
            path: path.into(),
            line: n + 1,
            message: e.to_string(),
        };
        if n == 0 && line.trim_start().starts_with("{\"meta\"") {
            meta = Some(serde_json::from_str::<MetaLine>(&line).map_err(parse_err)?.meta);
            continue;
        }
        let r: SampleRecord = serde_json::from_str(&line).map_err(parse_err)?;
        r.sample.validate().map_err(|e| CliError::Parse {
            path: path.into(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(SampleFile { meta, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub model_version: String,
    pub fusion: FusionConfig,
    pub params: FusionParams,
    pub stats: FusionStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: &FusionModel, history: Option<TrainHistory>, config: serde_json::Value) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model_version: securelink_core::harness::experiment::param_fingerprint(&model.params),
            fusion: model.config.clone(),
            params: model.params.clone(),
            stats: model.stats.clone(),
            history,
            config,
        }
    }

    pub fn model(&self) -> FusionModel {
        FusionModel {
            config: self.fusion.clone(),
            params: self.params.clone(),
            stats: self.stats.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let version: Versioned = read_json(path, "checkpoint")?;
        if version.version != CHECKPOINT_VERSION {
            return Err(format_error(
                path,
                format!("unsupported checkpoint version {}", version.version),
            ));
        }
        let ck: Checkpoint = read_json(path, "checkpoint")?;
        ck.model().validate().map_err(|e| format_error(path, e))?;
        Ok(ck)
    }
}

#[derive(Deserialize)]
struct Versioned {
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    pub version: u32,
    pub registry: UavRegistry,
    pub config: serde_json::Value,
}

impl RegistryFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let version: Versioned = read_json(path, "registry")?;
        if version.version != REGISTRY_VERSION {
            return Err(format_error(
                path,
                format!("unsupported registry version {}", version.version),
            ));
        }
        let file: RegistryFile = read_json(path, "registry")?;
        file.registry.validate().map_err(|e| format_error(path, e))?;
        Ok(file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Closed,
    Open,
}

/// Evaluation output. Holds no timings so reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub version: u32,
    pub kind: ReportKind,
    pub model_version: Option<String>,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_accuracy: Option<f64>,
    pub config: serde_json::Value,
}

impl ReportFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: ReportFile = read_json(path, "report")?;
        if file.version != REPORT_VERSION {
            return Err(format_error(
                path,
                format!("unsupported report version {}", file.version),
            ));
        }
        Ok(file)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_else(|| "n/a".into())
}

/// Human-readable summary table.
pub fn render_table(file: &ReportFile) -> String {
    let r = &file.report;
    let mut out = String::new();
    let kind = match file.kind {
        ReportKind::Closed => "closed world",
        ReportKind::Open => "open world",
    };
    out.push_str(&format!("{kind} evaluation\n"));
    if let Some(rows) = &r.per_round {
        out.push_str(&format!(
            "{:<7} {:<24} {:>9} {:>9} {:>9} {:>9}\n",
            "round", "impostors", "accuracy", "TNR", "recall", "precision"
        ));
        for row in rows {
            out.push_str(&format!(
                "{:<7} {:<24} {:>9} {:>9} {:>9} {:>9}\n",
                row.round,
                row.impostors.join(","),
                pct(row.accuracy),
                opt_pct(row.tnr),
                pct(row.recall),
                opt_pct(row.precision)
            ));
        }
        out.push_str(&format!(
            "{:<7} {:<24} {:>9} {:>9} {:>9} {:>9}\n",
            "average",
            "",
            pct(r.accuracy),
            opt_pct(r.tnr),
            pct(r.recall),
            opt_pct(r.precision)
        ));
    } else {
        for (name, value) in [
            ("accuracy", pct(r.accuracy)),
            ("TNR", opt_pct(r.tnr)),
            ("recall", pct(r.recall)),
            ("precision", opt_pct(r.precision)),
        ] {
            out.push_str(&format!("{name:<10} {value:>9}\n"));
        }
    }
    if let Some(b) = file.baseline_accuracy {
        out.push_str(&format!(
            "{:<10} {:>9}  (nearest-centroid baseline)\n",
            "baseline",
            pct(b)
        ));
    }
    out.push_str("\nconfusion (rows: actual, columns: predicted)\n");
    let width = r.labels.iter().map(String::len).max().unwrap_or(0).max(6);
    out.push_str(&format!("{:width$}", ""));
    for l in &r.labels {
        out.push_str(&format!(" {l:>width$}"));
    }
    out.push('\n');
    for (l, row) in r.labels.iter().zip(&r.confusion) {
        out.push_str(&format!("{l:width$}"));
        for v in row {
            out.push_str(&format!(" {v:>width$}"));
        }
        out.push('\n');
    }
    out
}

/// Confusion matrix as CSV with a header row of predicted labels.
pub fn write_confusion_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_error(path, e))?;
    let mut header = vec!["actual".to_string()];
    header.extend(report.labels.iter().cloned());
    w.write_record(&header).map_err(|e| format_error(path, e))?;
    for (l, row) in report.labels.iter().zip(&report.confusion) {
        let mut rec = vec![l.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(|e| format_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
