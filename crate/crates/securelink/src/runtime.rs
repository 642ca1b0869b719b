//! Per-stage wall-clock measurement of the verification path.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use securelink_core::fusion::{FusionModel, Mode};
use securelink_core::ocsvm::UavRegistry;
use securelink_core::signal::{self, AlignedSample, CsiMeasurement, PreprocessConfig, TelemetryFrame};

use crate::error::{CliError, Result};

pub const MIN_ITERATIONS: usize = 1000;

/// The three stages of verifying one input.
pub trait Stages {
    type Input;
    type Sample;
    type Embedding;

    fn preprocess(&self, input: &Self::Input) -> Result<Self::Sample>;
    fn fuse(&self, sample: &Self::Sample) -> Result<Self::Embedding>;
    fn identify(&self, embedding: &Self::Embedding) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub iterations: usize,
    pub preprocessing_ms: f64,
    pub fusion_ms: f64,
    pub identification_ms: f64,
}

impl RuntimeReport {
    pub fn total_ms(&self) -> f64 {
        self.preprocessing_ms + self.fusion_ms + self.identification_ms
    }
}

/// Mean milliseconds per stage over `max(iterations, 1000)` runs, cycling
/// through `inputs`, after one untimed pass over every input.
pub fn measure_runtime<S: Stages>(stages: &S, inputs: &[S::Input], iterations: usize) -> Result<RuntimeReport> {
    if inputs.is_empty() {
        return Err(CliError::Usage("runtime measurement needs at least one sample".into()));
    }
    for input in inputs {
        stages.identify(&stages.fuse(&stages.preprocess(input)?)?)?;
    }
    let iterations = iterations.max(MIN_ITERATIONS);
    let mut totals = [0.0f64; 3];
    for input in inputs.iter().cycle().take(iterations) {
        let t0 = Instant::now();
        let sample = stages.preprocess(input)?;
        let t1 = Instant::now();
        let embedding = stages.fuse(&sample)?;
        let t2 = Instant::now();
        std::hint::black_box(stages.identify(&embedding)?);
        let t3 = Instant::now();
        totals[0] += (t1 - t0).as_secs_f64();
        totals[1] += (t2 - t1).as_secs_f64();
        totals[2] += (t3 - t2).as_secs_f64();
    }
    let ms = |t: f64| 1e3 * t / iterations as f64;
    Ok(RuntimeReport {
        iterations,
        preprocessing_ms: ms(totals[0]),
        fusion_ms: ms(totals[1]),
        identification_ms: ms(totals[2]),
    })
}

/// Raw streams covering exactly one sample window.
#[derive(Debug, Clone)]
pub struct RawWindow {
    pub csi: Vec<CsiMeasurement>,
    pub telemetry: Vec<TelemetryFrame>,
}

/// Cuts a recording into windows of `sample_len` telemetry frames, each with
/// the CSI frames falling inside it.
pub fn raw_windows(csi: &[CsiMeasurement], telemetry: &[TelemetryFrame], sample_len: usize) -> Vec<RawWindow> {
    let mut out = Vec::new();
    if sample_len == 0 {
        return out;
    }
    for chunk in telemetry.chunks_exact(sample_len) {
        let (lo, hi) = (chunk[0].timestamp, chunk[sample_len - 1].timestamp);
        let window: Vec<CsiMeasurement> = csi
            .iter()
            .filter(|m| m.timestamp >= lo && m.timestamp <= hi)
            .cloned()
            .collect();
        if !window.is_empty() {
            out.push(RawWindow {
                csi: window,
                telemetry: chunk.to_vec(),
            });
        }
    }
    out
}

/// The trained pipeline, seen as stages.
pub struct PipelineStages<'a> {
    pub preprocess: &'a PreprocessConfig,
    pub model: &'a FusionModel,
    pub registry: &'a UavRegistry,
}

impl Stages for PipelineStages<'_> {
    type Input = RawWindow;
    type Sample = Option<AlignedSample>;
    type Embedding = Option<Vec<f64>>;

    fn preprocess(&self, input: &RawWindow) -> Result<Option<AlignedSample>> {
        let (samples, _) = signal::preprocess(&input.csi, &input.telemetry, self.preprocess, None)?;
        Ok(samples.into_iter().next())
    }

    fn fuse(&self, sample: &Option<AlignedSample>) -> Result<Option<Vec<f64>>> {
        sample
            .as_ref()
            .map(|s| self.model.forward_full(s, Mode::Eval))
            .transpose()
            .map_err(Into::into)
    }

    fn identify(&self, embedding: &Option<Vec<f64>>) -> Result<String> {
        match embedding {
            Some(g) => Ok(self.registry.identify_embedding(g)?.0.to_string()),
            None => Ok(String::new()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    struct Sleepy;

    impl Stages for Sleepy {
        type Input = ();
        type Sample = ();
        type Embedding = ();

        fn preprocess(&self, _: &()) -> Result<()> {
            std::thread::sleep(Duration::from_millis(1));
            Ok(())
        }

        fn fuse(&self, _: &()) -> Result<()> {
            std::thread::sleep(Duration::from_millis(1));
            Ok(())
        }

        fn identify(&self, _: &()) -> Result<String> {
            std::thread::sleep(Duration::from_millis(1));
            Ok(String::new())
        }
    }

    #[test]
    fn sleeping_stages_measure_about_one_millisecond() {
        let r = measure_runtime(&Sleepy, &[()], 10).unwrap();
        assert_eq!(r.iterations, MIN_ITERATIONS);
        for ms in [r.preprocessing_ms, r.fusion_ms, r.identification_ms] {
            assert!((1.0..2.5).contains(&ms), "{ms}");
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(measure_runtime(&Sleepy, &[], 1000).is_err());
    }
}
