//! Fingerprint preprocessing for both modalities.
//!
//! RF side: unwrap subcarrier phases, drop frames whose phase gradient is too
//! irregular, then remove the best-fit line over subcarrier index. What is
//! left is the nonlinear phase error, which carries the transmitter's
//! hardware imperfections.
//!
//! MEMS side: project telemetry records onto eight sensor fields and drop
//! frames holding saturated or out-of-range readings.
//!
//! Finally the (sparser) phase-error stream is linearly interpolated onto the
//! telemetry timestamps and cut into fixed-length samples.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, TAU};
use crate::matrix::Matrix;

/// One timestamped CSI phase vector, DC subcarrier already removed.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CsiMeasurement {
    pub timestamp: f64,
    pub phases: Vec<f64>,
    pub subcarrier_indices: Vec<i32>,
    pub rssi_dbm: Option<f64>,
    pub noise_dbm: Option<f64>,
}

impl CsiMeasurement {
    pub fn new(timestamp: f64, phases: Vec<f64>, subcarrier_indices: Vec<i32>) -> Result<Self> {
        let m = CsiMeasurement {
            timestamp,
            phases,
            subcarrier_indices,
            rssi_dbm: None,
            noise_dbm: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.phases.len();
        if k < 2 {
            return Err(Error::InvalidInput(format!(
                "CSI measurement needs at least 2 subcarriers, got {k}"
            )));
        }
        if self.subcarrier_indices.len() != k {
            return Err(Error::InvalidInput(format!(
                "{k} phases but {} subcarrier indices",
                self.subcarrier_indices.len()
            )));
        }
        if self.subcarrier_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "subcarrier indices must be strictly increasing".into(),
            ));
        }
        if self.phases.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite phase".into()));
        }
        if !(self.timestamp.is_finite() && self.timestamp >= 0.0) {
            return Err(Error::InvalidInput(format!("bad timestamp {}", self.timestamp)));
        }
        Ok(())
    }

    /// Drops the DC (index 0) subcarrier if present.
    pub fn without_dc(mut self) -> Self {
        if let Some(pos) = self.subcarrier_indices.iter().position(|&i| i == 0) {
            self.subcarrier_indices.remove(pos);
            self.phases.remove(pos);
        }
        self
    }

    pub fn num_subcarriers(&self) -> usize {
        self.phases.len()
    }
}

/// Nonlinear phase residual of one CSI measurement.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhaseErrorFrame {
    pub timestamp: f64,
    pub errors: Vec<f64>,
}

/// The eight telemetry fields kept as MEMS fingerprints, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TelemetryField {
    Pitch,
    Roll,
    Yaw,
    AccX,
    AccY,
    AccZ,
    Baro,
    Tof,
}

impl TelemetryField {
    pub const COUNT: usize = 8;

    pub const ALL: [TelemetryField; 8] = [
        TelemetryField::Pitch,
        TelemetryField::Roll,
        TelemetryField::Yaw,
        TelemetryField::AccX,
        TelemetryField::AccY,
        TelemetryField::AccZ,
        TelemetryField::Baro,
        TelemetryField::Tof,
    ];

    pub fn key(self) -> &'static str {
        match self {
            TelemetryField::Pitch => "pitch",
            TelemetryField::Roll => "roll",
            TelemetryField::Yaw => "yaw",
            TelemetryField::AccX => "acc_x",
            TelemetryField::AccY => "acc_y",
            TelemetryField::AccZ => "acc_z",
            TelemetryField::Baro => "baro",
            TelemetryField::Tof => "tof",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.key() == key)
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// One timestamped MEMS reading. `values` follows [`TelemetryField::ALL`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TelemetryFrame {
    pub timestamp: f64,
    pub values: [f64; 8],
}

impl TelemetryFrame {
    #[inline]
    pub fn get(&self, field: TelemetryField) -> f64 {
        self.values[field.index()]
    }

    pub fn pitch(&self) -> f64 {
        self.get(TelemetryField::Pitch)
    }

    pub fn roll(&self) -> f64 {
        self.get(TelemetryField::Roll)
    }

    pub fn yaw(&self) -> f64 {
        self.get(TelemetryField::Yaw)
    }

    pub fn acc(&self) -> [f64; 3] {
        [self.values[3], self.values[4], self.values[5]]
    }

    pub fn baro(&self) -> f64 {
        self.get(TelemetryField::Baro)
    }

    pub fn tof(&self) -> f64 {
        self.get(TelemetryField::Tof)
    }
}

/// An `M`-frame window of aligned phase errors and telemetry; the unit of
/// authentication.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlignedSample {
    /// `M x K` phase errors.
    pub rf: Matrix,
    /// `M x 8` telemetry values.
    pub mems: Matrix,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub device_id: Option<String>,
}

impl AlignedSample {
    pub fn new(rf: Matrix, mems: Matrix, device_id: Option<String>) -> Result<Self> {
        let s = AlignedSample { rf, mems, device_id };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.rf.rows();
        if m != self.mems.rows() {
            return Err(Error::Shape(format!(
                "rf has {m} rows but mems has {}",
                self.mems.rows()
            )));
        }
        if m < 2 || m % 2 != 0 {
            return Err(Error::Shape(format!("sample length must be even and >= 2, got {m}")));
        }
        if self.mems.cols() != TelemetryField::COUNT {
            return Err(Error::Shape(format!(
                "mems must have 8 columns, got {}",
                self.mems.cols()
            )));
        }
        if self.rf.cols() < 2 {
            return Err(Error::Shape("rf needs at least 2 subcarriers".into()));
        }
        Ok(())
    }

    pub fn sample_len(&self) -> usize {
        self.rf.rows()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.rf.cols()
    }

    pub fn with_device_id(mut self, id: impl Into<String>) -> Self {
        self.device_id = Some(id.into());
        self
    }
}

/// Thresholds and valid ranges used during preprocessing.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PreprocessConfig {
    /// Phase-gradient variance threshold; frames at or above it are dropped.
    pub eta: f64,
    /// Frames per sample (`M`).
    pub sample_len: usize,
    /// Per-field `(min, max)` valid interval, canonical order.
    pub field_ranges: [(f64, f64); 8],
    /// Per-field register saturation values, canonical order.
    pub saturation_sentinels: [Vec<f64>; 8],
}

/// Full-scale reading of a 16-bit ToF distance register.
pub const DEFAULT_TOF_SENTINEL: f64 = 65535.0;

impl Default for PreprocessConfig {
    fn default() -> Self {
        let mut saturation_sentinels: [Vec<f64>; 8] = Default::default();
        saturation_sentinels[TelemetryField::Tof.index()] = vec![DEFAULT_TOF_SENTINEL];
        PreprocessConfig {
            eta: 4.0,
            sample_len: 6,
            field_ranges: [(f64::NEG_INFINITY, f64::INFINITY); 8],
            saturation_sentinels,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        // eta = 0 is allowed: it filters everything, which the CLI reports as a warning.
        if !(self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.sample_len < 2 || self.sample_len % 2 != 0 {
            return Err(Error::Config(format!(
                "sample_len must be even and >= 2, got {}",
                self.sample_len
            )));
        }
        for (f, (lo, hi)) in TelemetryField::ALL.iter().zip(&self.field_ranges) {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Config(format!("invalid range for {}: ({lo}, {hi})", f.key())));
            }
        }
        Ok(())
    }
}

/// Removes `2π` jumps so successive differences lie in `(-π, π]`.
pub fn unwrap_phases(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidInput("non-finite phase".into()));
    }
    let mut out = Vec::with_capacity(raw.len());
    let mut offset = 0.0;
    for (k, &p) in raw.iter().enumerate() {
        if k > 0 {
            let d = p - raw[k - 1];
            // number of whole turns to subtract so d lands in (-π, π]
            let turns = math::ceil((d - math::PI) / TAU);
            offset -= turns * TAU;
        }
        out.push(p + offset);
    }
    Ok(out)
}

/// Population variance of the successive phase differences.
pub fn phase_gradient_variance(phi: &[f64]) -> Result<f64> {
    if phi.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 phases, got {}",
            phi.len()
        )));
    }
    let grad: Vec<f64> = phi.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(math::population_variance(&grad))
}

/// Keeps frames whose phase-gradient variance is below `cfg.eta`.
pub fn filter_csi(frames: &[CsiMeasurement], cfg: &PreprocessConfig) -> Vec<CsiMeasurement> {
    frames
        .iter()
        .filter(|f| phase_gradient_variance(&f.phases).is_ok_and(|v| v < cfg.eta))
        .cloned()
        .collect()
}

/// Least-squares line `phase ≈ slope * index + intercept`.
pub fn estimate_linear_component(phi: &[f64], indices: &[i32]) -> Result<(f64, f64)> {
    if phi.len() < 2 || phi.len() != indices.len() {
        return Err(Error::InvalidInput(format!(
            "need >= 2 phases with matching indices, got {} and {}",
            phi.len(),
            indices.len()
        )));
    }
    let n = phi.len() as f64;
    let mean_i = indices.iter().map(|&i| i as f64).sum::<f64>() / n;
    let mean_p = phi.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&p, &i) in phi.iter().zip(indices) {
        let dx = i as f64 - mean_i;
        sxx += dx * dx;
        sxy += dx * (p - mean_p);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit);
    }
    let slope = sxy / sxx;
    Ok((slope, mean_p - slope * mean_i))
}

/// Residual of the phases after removing the fitted linear component.
pub fn extract_phase_error(m: &CsiMeasurement) -> Result<PhaseErrorFrame> {
    let (slope, intercept) = estimate_linear_component(&m.phases, &m.subcarrier_indices)?;
    let errors = m
        .phases
        .iter()
        .zip(&m.subcarrier_indices)
        .map(|(&p, &i)| p - slope * i as f64 - intercept)
        .collect();
    Ok(PhaseErrorFrame {
        timestamp: m.timestamp,
        errors,
    })
}

/// Projects a telemetry record onto the eight canonical fields.
///
/// `timestamp_key` names the record entry holding the timestamp.
pub fn select_telemetry_fields<'a, I>(raw: I, timestamp_key: &str) -> Result<TelemetryFrame>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let record: BTreeMap<&str, f64> = raw.into_iter().collect();
    let timestamp = *record
        .get(timestamp_key)
        .ok_or_else(|| Error::Schema(timestamp_key.to_string()))?;
    let mut values = [0.0; 8];
    for field in TelemetryField::ALL {
        values[field.index()] = *record
            .get(field.key())
            .ok_or_else(|| Error::Schema(field.key().to_string()))?;
    }
    Ok(TelemetryFrame { timestamp, values })
}

fn is_outlier(frame: &TelemetryFrame, cfg: &PreprocessConfig) -> bool {
    frame.values.iter().enumerate().any(|(k, &v)| {
        let (lo, hi) = cfg.field_ranges[k];
        !v.is_finite() || v < lo || v > hi || cfg.saturation_sentinels[k].contains(&v)
    })
}

/// Drops frames holding a saturated or out-of-range field.
pub fn remove_telemetry_outliers(frames: &[TelemetryFrame], cfg: &PreprocessConfig) -> Vec<TelemetryFrame> {
    frames.iter().filter(|f| !is_outlier(f, cfg)).cloned().collect()
}

fn check_sorted(ts: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for t in ts {
        if !(t >= prev) {
            return Err(Error::InvalidInput(format!(
                "{what} timestamps are not sorted ascending"
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Resamples the phase-error stream at every telemetry timestamp.
///
/// Each telemetry frame is paired with the per-subcarrier linear
/// interpolation of the two bracketing phase-error frames. Timestamps outside
/// the RF span take the nearest endpoint frame.
pub fn align_interpolate(
    errors: &[PhaseErrorFrame],
    telemetry: &[TelemetryFrame],
) -> Result<Vec<(PhaseErrorFrame, TelemetryFrame)>> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("phase-error stream is empty".into()));
    }
    if telemetry.is_empty() {
        return Err(Error::InvalidInput("telemetry stream is empty".into()));
    }
    check_sorted(errors.iter().map(|e| e.timestamp), "phase-error")?;
    check_sorted(telemetry.iter().map(|s| s.timestamp), "telemetry")?;
    let k = errors[0].errors.len();
    if errors.iter().any(|e| e.errors.len() != k) {
        return Err(Error::InvalidInput(
            "phase-error frames have differing subcarrier counts".into(),
        ));
    }

    let first = &errors[0];
    let last = &errors[errors.len() - 1];
    let out = telemetry
        .iter()
        .map(|s| {
            let t = s.timestamp;
            let values = if t <= first.timestamp {
                first.errors.clone()
            } else if t >= last.timestamp {
                last.errors.clone()
            } else {
                // first frame strictly after t; 1 <= hi < len
                let hi = errors.partition_point(|e| e.timestamp <= t);
                let (e0, e1) = (&errors[hi - 1], &errors[hi]);
                let w = (t - e0.timestamp) / (e1.timestamp - e0.timestamp);
                e0.errors
                    .iter()
                    .zip(&e1.errors)
                    .map(|(a, b)| (1.0 - w) * a + w * b)
                    .collect()
            };
            (
                PhaseErrorFrame {
                    timestamp: t,
                    errors: values,
                },
                s.clone(),
            )
        })
        .collect();
    Ok(out)
}

/// Cuts aligned rows into non-overlapping windows of `sample_len` rows.
/// A trailing remainder shorter than a window is discarded.
pub fn window_samples(
    aligned: &[(PhaseErrorFrame, TelemetryFrame)],
    sample_len: usize,
    device_id: Option<&str>,
) -> Result<Vec<AlignedSample>> {
    if sample_len < 2 || sample_len % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "sample length must be even and >= 2, got {sample_len}"
        )));
    }
    aligned
        .chunks_exact(sample_len)
        .map(|chunk| {
            let rf = Matrix::from_rows(&chunk.iter().map(|(e, _)| e.errors.as_slice()).collect::<Vec<_>>())?;
            let mems = Matrix::from_rows(&chunk.iter().map(|(_, s)| &s.values[..]).collect::<Vec<_>>())?;
            AlignedSample::new(rf, mems, device_id.map(String::from))
        })
        .collect()
}

/// Frame counts from one [`preprocess`] run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PreprocessSummary {
    pub csi_frames_read: usize,
    pub csi_frames_filtered: usize,
    pub telemetry_frames_read: usize,
    pub telemetry_outliers_dropped: usize,
    pub samples_emitted: usize,
}

/// The whole preprocessing chain for one device's recording.
///
/// If every CSI frame is filtered out, no samples are produced and the
/// summary says so; this is not an error.
pub fn preprocess(
    csi: &[CsiMeasurement],
    telemetry: &[TelemetryFrame],
    cfg: &PreprocessConfig,
    device_id: Option<&str>,
) -> Result<(Vec<AlignedSample>, PreprocessSummary)> {
    cfg.validate()?;
    if telemetry.is_empty() {
        return Err(Error::InvalidInput("telemetry stream empty".into()));
    }
    if csi.is_empty() {
        return Err(Error::InvalidInput("CSI stream empty".into()));
    }
    let mut summary = PreprocessSummary {
        csi_frames_read: csi.len(),
        telemetry_frames_read: telemetry.len(),
        ..Default::default()
    };

    let unwrapped = csi
        .iter()
        .map(|m| {
            m.validate()?;
            Ok(CsiMeasurement {
                phases: unwrap_phases(&m.phases)?,
                ..m.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let kept = filter_csi(&unwrapped, cfg);
    summary.csi_frames_filtered = unwrapped.len() - kept.len();
    let errors = kept.iter().map(extract_phase_error).collect::<Result<Vec<_>>>()?;

    let clean = remove_telemetry_outliers(telemetry, cfg);
    summary.telemetry_outliers_dropped = telemetry.len() - clean.len();

    if errors.is_empty() || clean.is_empty() {
        return Ok((Vec::new(), summary));
    }
    let aligned = align_interpolate(&errors, &clean)?;
    let samples = window_samples(&aligned, cfg.sample_len, device_id)?;
    summary.samples_emitted = samples.len();
    Ok((samples, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn indices(k: usize) -> Vec<i32> {
        let half = (k / 2) as i32;
        (-half..=half).filter(|&i| i != 0).take(k).collect()
    }

    #[test]
    fn unwrap_examples() {
        assert_eq!(unwrap_phases(&[0.0, 0.1, 0.2]).unwrap(), vec![0.0, 0.1, 0.2]);
        let out = unwrap_phases(&[3.0, -3.0]).unwrap();
        assert_eq!(out[0], 3.0);
        // oracle: add 2π when the step is below -π
        assert!(close(out[1], -3.0 + TAU, 1e-12));
        assert!(close(out[1], 3.2831853, 1e-7));
        assert_eq!(unwrap_phases(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 1.0, 1.0]);
        assert!(matches!(unwrap_phases(&[0.0, f64::NAN]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradient_variance_examples() {
        assert_eq!(phase_gradient_variance(&[0.0, 1.0, 2.0, 3.0]).unwrap(), 0.0);
        // gradients (1, 2): mean 1.5, deviations ±0.5
        assert!(close(phase_gradient_variance(&[0.0, 1.0, 3.0]).unwrap(), 0.25, 1e-15));
        assert_eq!(phase_gradient_variance(&[5.0, 3.0, 1.0, -1.0]).unwrap(), 0.0);
        assert!(phase_gradient_variance(&[1.0]).is_err());
    }

    #[test]
    fn filter_examples() {
        let cfg = PreprocessConfig::default();
        assert!(filter_csi(&[], &cfg).is_empty());
        let linear = CsiMeasurement::new(0.0, vec![0.0, 1.0, 2.0, 3.0], vec![-2, -1, 1, 2]).unwrap();
        assert_eq!(filter_csi(&[linear.clone()], &cfg), vec![linear]);
        let steep = CsiMeasurement::new(0.0, vec![0.0, 0.0, 10.0, 10.0, 20.0], vec![-2, -1, 1, 2, 3]).unwrap();
        // gradients (0, 10, 0, 10): mean 5, variance 25
        assert!(close(phase_gradient_variance(&steep.phases).unwrap(), 25.0, 1e-12));
        assert!(filter_csi(&[steep], &cfg).is_empty());
    }

    #[test]
    fn linear_fit_examples() {
        let idx = [-2, -1, 1, 2];
        let phi: Vec<f64> = idx.iter().map(|&i| 2.0 * i as f64 + 1.0).collect();
        let (s, c) = estimate_linear_component(&phi, &idx).unwrap();
        assert!(close(s, 2.0, 1e-12) && close(c, 1.0, 1e-12));
        let (s, c) = estimate_linear_component(&[1.0; 4], &idx).unwrap();
        assert!(close(s, 0.0, 1e-12) && close(c, 1.0, 1e-12));
        // closed form: slope = Σ i φ / Σ i² = 0.1 / 2, intercept = mean φ = 0.2 / 3
        let (s, c) = estimate_linear_component(&[0.0, 0.1, 0.1], &[-1, 0, 1]).unwrap();
        assert!(close(s, 0.05, 1e-12));
        assert!(close(c, 0.0666667, 1e-7));
        assert_eq!(
            estimate_linear_component(&[0.0, 1.0], &[3, 3]),
            Err(Error::DegenerateFit)
        );
    }

    #[test]
    fn phase_error_of_bumped_line_is_bump_residual() {
        let idx = indices(8);
        let bump = 0.7;
        let mut phi: Vec<f64> = idx.iter().map(|&i| 0.3 * i as f64 - 1.0).collect();
        phi[2] += bump;
        let m = CsiMeasurement::new(1.0, phi, idx.clone()).unwrap();
        let e = extract_phase_error(&m).unwrap();
        // oracle: residual of the least-squares fit to a lone spike δ at position p
        // is δ(1[k = p] - 1/n - (i_k - ī)(i_p - ī)/Σ(i - ī)²)
        let n = idx.len() as f64;
        let mean_i = idx.iter().map(|&i| i as f64).sum::<f64>() / n;
        let sxx: f64 = idx.iter().map(|&i| (i as f64 - mean_i).powi(2)).sum();
        for (k, &i) in idx.iter().enumerate() {
            let spike = if k == 2 { 1.0 } else { 0.0 };
            let expect = bump * (spike - 1.0 / n - (i as f64 - mean_i) * (idx[2] as f64 - mean_i) / sxx);
            assert!(close(e.errors[k], expect, 1e-12), "k={k}: {} vs {expect}", e.errors[k]);
        }
        let linear = CsiMeasurement::new(0.0, idx.iter().map(|&i| 1.5 * i as f64).collect(), idx).unwrap();
        assert!(extract_phase_error(&linear)
            .unwrap()
            .errors
            .iter()
            .all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn telemetry_projection() {
        let mut record: Vec<(String, f64)> = (0..192).map(|i| (format!("extra{i}"), i as f64)).collect();
        for (n, f) in TelemetryField::ALL.iter().enumerate() {
            record.push((f.key().to_string(), n as f64 + 10.0));
        }
        record.push(("time".to_string(), 4.5));
        assert_eq!(record.len(), 201);
        let frame = select_telemetry_fields(record.iter().map(|(k, v)| (k.as_str(), *v)), "time").unwrap();
        assert_eq!(frame.timestamp, 4.5);
        assert_eq!(frame.values, [10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0]);

        let missing = record.iter().filter(|(k, _)| k != "tof").map(|(k, v)| (k.as_str(), *v));
        assert_eq!(
            select_telemetry_fields(missing, "time"),
            Err(Error::Schema("tof".into()))
        );
    }

    fn frame(t: f64, v: f64) -> TelemetryFrame {
        TelemetryFrame {
            timestamp: t,
            values: [v; 8],
        }
    }

    #[test]
    fn outlier_removal() {
        let cfg = PreprocessConfig::default();
        let mut saturated = frame(0.0, 1.0);
        saturated.values[TelemetryField::Tof.index()] = DEFAULT_TOF_SENTINEL;
        let ok = frame(0.1, 1.0);
        assert_eq!(
            remove_telemetry_outliers(&[saturated, ok.clone()], &cfg),
            vec![ok.clone()]
        );
        assert!(remove_telemetry_outliers(&[], &cfg).is_empty());

        let mut ranged = cfg.clone();
        ranged.field_ranges[TelemetryField::Baro.index()] = (0.0, 0.5);
        assert!(remove_telemetry_outliers(&[ok], &ranged).is_empty());
    }

    fn err_frame(t: f64, v: f64) -> PhaseErrorFrame {
        PhaseErrorFrame {
            timestamp: t,
            errors: vec![v, -v],
        }
    }

    #[test]
    fn alignment_examples() {
        let e = [err_frame(0.0, 1.0), err_frame(1.0, 2.0)];
        let s = [frame(0.0, 0.0), frame(1.0, 0.0)];
        let out = align_interpolate(&e, &s).unwrap();
        assert_eq!(out[0].0, e[0]);
        assert_eq!(out[1].0, e[1]);

        let e = [err_frame(0.0, 0.0), err_frame(2.0, 4.0)];
        let out = align_interpolate(&e, &[frame(1.0, 0.0)]).unwrap();
        assert_eq!(out[0].0.errors, vec![2.0, -2.0]);

        let out = align_interpolate(&e, &[frame(-1.0, 0.0), frame(5.0, 0.0)]).unwrap();
        assert_eq!(out[0].0.errors, e[0].errors);
        assert_eq!(out[1].0.errors, e[1].errors);
        assert_eq!(out[0].0.timestamp, -1.0);

        assert!(align_interpolate(&[], &[frame(0.0, 0.0)]).is_err());
        assert!(align_interpolate(&e, &[]).is_err());
        assert!(align_interpolate(&[e[1].clone(), e[0].clone()], &[frame(0.0, 0.0)]).is_err());
    }

    #[test]
    fn windowing_examples() {
        let rows: Vec<_> = (0..13)
            .map(|i| (err_frame(i as f64, 0.0), frame(i as f64, 0.0)))
            .collect();
        let w = window_samples(&rows, 6, Some("uav")).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].rf.shape(), (6, 2));
        assert_eq!(w[1].mems.get(0, 0), 0.0);
        assert_eq!(w[0].device_id.as_deref(), Some("uav"));
        assert_eq!(window_samples(&rows[..6], 6, None).unwrap().len(), 1);
        assert!(window_samples(&rows[..5], 6, None).unwrap().is_empty());
        assert!(window_samples(&rows, 3, None).is_err());
    }

    #[test]
    fn preprocess_reports_counts() {
        let idx = indices(4);
        let csi: Vec<_> = (0..10)
            .map(|t| CsiMeasurement::new(t as f64 * 0.2, vec![0.0, 0.5, 0.2, 0.9], idx.clone()).unwrap())
            .collect();
        let mut tel: Vec<_> = (0..20).map(|t| frame(t as f64 * 0.1, 1.0)).collect();
        tel[3].values[7] = DEFAULT_TOF_SENTINEL;
        let (samples, summary) = preprocess(&csi, &tel, &PreprocessConfig::default(), Some("a")).unwrap();
        assert_eq!(summary.telemetry_outliers_dropped, 1);
        assert_eq!(summary.csi_frames_filtered, 0);
        assert_eq!(samples.len(), 3);
        assert_eq!(summary.samples_emitted, 3);

        let strict = PreprocessConfig {
            eta: 0.0,
            ..Default::default()
        };
        let (samples, summary) = preprocess(&csi, &tel, &strict, None).unwrap();
        assert!(samples.is_empty());
        assert_eq!(summary.csi_frames_filtered, 10);

        assert!(preprocess(&csi, &[], &PreprocessConfig::default(), None).is_err());
    }

    proptest! {
        #[test]
        fn unwrapped_steps_lie_in_half_open_interval(raw in proptest::collection::vec(-10.0f64..10.0, 2..40)) {
            let out = unwrap_phases(&raw).unwrap();
            prop_assert_eq!(out[0], raw[0]);
            for w in out.windows(2) {
                let d = w[1] - w[0];
                prop_assert!(d > -math::PI - 1e-9 && d <= math::PI + 1e-9);
            }
        }

        #[test]
        fn slope_invariance(
            phases in proptest::collection::vec(-3.0f64..3.0, 8),
            c in -2.0f64..2.0,
            d in -5.0f64..5.0,
        ) {
            let idx = indices(8);
            let base = CsiMeasurement::new(0.0, phases.clone(), idx.clone()).unwrap();
            let shifted: Vec<f64> = phases.iter().zip(&idx).map(|(p, &i)| p + c * i as f64 + d).collect();
            let moved = CsiMeasurement::new(0.0, shifted, idx.clone()).unwrap();
            let a = extract_phase_error(&base).unwrap();
            let b = extract_phase_error(&moved).unwrap();
            for (x, y) in a.errors.iter().zip(&b.errors) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!(math::mean(&a.errors).abs() < 1e-9);
            let weighted: f64 = a.errors.iter().zip(&idx).map(|(e, &i)| e * i as f64).sum();
            prop_assert!(weighted.abs() < 1e-9);
        }

        #[test]
        fn outlier_removal_is_idempotent(vals in proptest::collection::vec(0.0f64..10.0, 0..30)) {
            let mut cfg = PreprocessConfig::default();
            cfg.field_ranges[0] = (0.0, 8.0);
            cfg.saturation_sentinels[1] = vec![5.0];
            let frames: Vec<_> = vals.iter().enumerate()
                .map(|(i, &v)| TelemetryFrame { timestamp: i as f64, values: [v, v.floor(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0] })
                .collect();
            let once = remove_telemetry_outliers(&frames, &cfg);
            prop_assert_eq!(remove_telemetry_outliers(&once, &cfg), once);
        }
    }
}
