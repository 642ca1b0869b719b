//! Synthetic fleets: per-device sensor and radio imperfections applied to
//! scripted flights.
//!
//! Accelerometer output is `o = diag(c) · D · (a + b)` with scale `c`,
//! unit-diagonal cross-axis matrix `D`, ideal signal `a` and bias `b`. CSI
//! phases are a random per-frame line over subcarrier index plus the device's
//! phase signature, a fleet-wide environment term and Gaussian noise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::math::{self, PI, TAU};
use crate::signal::{self, AlignedSample, CsiMeasurement, PreprocessConfig, TelemetryFrame, DEFAULT_TOF_SENTINEL};

pub const GRAVITY: f64 = 9.81;

/// Subcarrier indices of a 20 MHz channel with the DC bin removed.
pub fn standard_subcarriers(k: usize) -> Vec<i32> {
    let half = (k / 2) as i32;
    (-half..=half).filter(|&i| i != 0).take(k).collect()
}

/// Hardware imperfections of one device.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DeviceImperfection {
    pub scale: [f64; 3],
    /// Unit diagonal; off-diagonal entries couple the axes.
    pub cross_axis: [[f64; 3]; 3],
    pub bias: [f64; 3],
    /// Metres.
    pub baro_offset: f64,
    /// Centimetres.
    pub tof_offset: f64,
    /// Radians per subcarrier; zero mean and no linear trend over index.
    pub phase_signature: Vec<f64>,
    pub phase_noise_std: f64,
    /// Accelerometer noise in m/s²; barometer and ToF noise are scaled from it.
    pub sensor_noise_std: f64,
}

impl DeviceImperfection {
    /// A device without imperfections or noise.
    pub fn ideal(num_subcarriers: usize) -> Self {
        DeviceImperfection {
            scale: [1.0; 3],
            cross_axis: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            bias: [0.0; 3],
            baro_offset: 0.0,
            tof_offset: 0.0,
            phase_signature: vec![0.0; num_subcarriers],
            phase_noise_std: 0.0,
            sensor_noise_std: 0.0,
        }
    }

    pub fn num_subcarriers(&self) -> usize {
        self.phase_signature.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidInput("scale entries must be positive".into()));
        }
        if (0..3).any(|i| self.cross_axis[i][i] != 1.0) {
            return Err(Error::InvalidInput(
                "cross-axis matrix must have a unit diagonal".into(),
            ));
        }
        if !(self.phase_noise_std >= 0.0 && self.sensor_noise_std >= 0.0) {
            return Err(Error::InvalidInput("noise levels must be non-negative".into()));
        }
        let k = self.phase_signature.len();
        if k < 2 {
            return Err(Error::InvalidInput(
                "phase signature needs at least 2 subcarriers".into(),
            ));
        }
        let mean = math::mean(&self.phase_signature);
        let (slope, _) = signal::estimate_linear_component(&self.phase_signature, &standard_subcarriers(k))?;
        if mean.abs() > 1e-9 || slope.abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "phase signature must have zero mean and zero slope".into(),
            ));
        }
        Ok(())
    }

    /// Applies the accelerometer model to an ideal reading.
    pub fn accelerometer(&self, ideal: [f64; 3]) -> [f64; 3] {
        let shifted = [
            ideal[0] + self.bias[0],
            ideal[1] + self.bias[1],
            ideal[2] + self.bias[2],
        ];
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let coupled: f64 = (0..3).map(|j| self.cross_axis[i][j] * shifted[j]).sum();
            *o = self.scale[i] * coupled;
        }
        out
    }
}

/// Removes mean and least-squares line over `indices`.
pub fn detrend(values: &[f64], indices: &[i32]) -> Result<Vec<f64>> {
    let (slope, intercept) = signal::estimate_linear_component(values, indices)?;
    Ok(values
        .iter()
        .zip(indices)
        .map(|(v, &i)| v - slope * i as f64 - intercept)
        .collect())
}

/// Spread of imperfections across a generated fleet.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FleetSpec {
    pub num_devices: usize,
    pub num_subcarriers: usize,
    /// Standard deviation of `c - 1`.
    pub scale_std: f64,
    pub cross_axis_std: f64,
    /// m/s².
    pub bias_std: f64,
    pub baro_offset_std: f64,
    pub tof_offset_std: f64,
    /// RMS of the phase signature in radians.
    pub signature_rms: f64,
    /// Per-device phase noise is drawn uniformly from this range.
    pub phase_noise_range: (f64, f64),
    pub sensor_noise_range: (f64, f64),
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            num_devices: 10,
            num_subcarriers: 52,
            scale_std: 0.02,
            cross_axis_std: 0.01,
            bias_std: 0.08,
            baro_offset_std: 0.3,
            tof_offset_std: 1.5,
            signature_rms: 0.08,
            phase_noise_range: (0.1, 0.2),
            sensor_noise_range: (0.04, 0.08),
        }
    }
}

impl FleetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 || self.num_subcarriers < 4 {
            return Err(Error::Config("fleet needs devices and at least 4 subcarriers".into()));
        }
        let stds = [
            self.scale_std,
            self.cross_axis_std,
            self.bias_std,
            self.baro_offset_std,
            self.tof_offset_std,
            self.signature_rms,
        ];
        if stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("fleet spreads must be finite and non-negative".into()));
        }
        for (lo, hi) in [self.phase_noise_range, self.sensor_noise_range] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("invalid noise range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

/// Smooth zero-mean, zero-slope curve over subcarriers with the given RMS.
fn smooth_signature(rng: &mut ChaCha8Rng, indices: &[i32], rms: f64) -> Result<Vec<f64>> {
    let span = indices.iter().map(|i| i.unsigned_abs()).max().unwrap_or(1).max(1) as f64;
    let mut raw = vec![0.0; indices.len()];
    for _ in 0..4 {
        let amp = gauss(rng);
        let freq = rng.random_range(0.5..3.0);
        let phase = rng.random_range(0.0..TAU);
        for (r, &i) in raw.iter_mut().zip(indices) {
            *r += amp * math::sin(PI * freq * i as f64 / span + phase);
        }
    }
    let curve = detrend(&raw, indices)?;
    let norm = math::sqrt(curve.iter().map(|x| x * x).sum::<f64>() / curve.len() as f64);
    if norm == 0.0 {
        return Ok(curve);
    }
    Ok(curve.iter().map(|x| x * rms / norm).collect())
}

/// Draws `spec.num_devices` devices; the result depends only on `seed`.
pub fn generate_fleet(spec: &FleetSpec, seed: u64) -> Result<Vec<(String, DeviceImperfection)>> {
    spec.validate()?;
    let indices = standard_subcarriers(spec.num_subcarriers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fleet = Vec::with_capacity(spec.num_devices);
    for d in 0..spec.num_devices {
        let mut cross_axis = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (i, row) in cross_axis.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v = spec.cross_axis_std * gauss(&mut rng);
                }
            }
        }
        let scale = core::array::from_fn(|_| (1.0 + spec.scale_std * gauss(&mut rng)).max(0.5));
        let bias = core::array::from_fn(|_| spec.bias_std * gauss(&mut rng));
        let dev = DeviceImperfection {
            scale,
            cross_axis,
            bias,
            baro_offset: spec.baro_offset_std * gauss(&mut rng),
            tof_offset: spec.tof_offset_std * gauss(&mut rng),
            phase_signature: smooth_signature(&mut rng, &indices, spec.signature_rms)?,
            phase_noise_std: uniform(&mut rng, spec.phase_noise_range),
            sensor_noise_std: uniform(&mut rng, spec.sensor_noise_range),
        };
        fleet.push((format!("uav-{d:02}"), dev));
    }
    Ok(fleet)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Maneuver {
    Stationary,
    Hover,
    Up,
    Down,
    Left,
    Right,
    Rotate,
}

/// Peak speed of translational maneuvers, m/s.
const MANEUVER_SPEED: f64 = 0.6;
/// Yaw rate while rotating, degrees per second.
const YAW_RATE: f64 = 30.0;
/// Airframe turbulence while airborne, m/s².
const TURBULENCE_STD: f64 = 0.15;

/// Scripted flight plan and sampling behaviour of the radio and telemetry links.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MotionProfile {
    /// `(duration in seconds, maneuver)` segments flown in order.
    pub schedule: Vec<(f64, Maneuver)>,
    pub telemetry_rate: f64,
    /// Mean CSI frame rate; intervals are jittered by ±50%.
    pub csi_rate: f64,
    pub csi_drop_prob: f64,
    /// Probability that a CSI frame is hit by narrowband interference.
    pub interference_prob: f64,
    /// Probability that the ToF register reads saturated.
    pub tof_dropout_prob: f64,
}

impl MotionProfile {
    /// The standard maneuver cycle repeated until it covers `duration` seconds.
    pub fn standard(duration: f64) -> Self {
        let cycle = [
            (3.0, Maneuver::Stationary),
            (4.0, Maneuver::Hover),
            (3.0, Maneuver::Up),
            (3.0, Maneuver::Left),
            (4.0, Maneuver::Rotate),
            (3.0, Maneuver::Right),
            (3.0, Maneuver::Down),
            (3.0, Maneuver::Hover),
        ];
        let mut schedule = Vec::new();
        let mut total = 0.0;
        while total < duration {
            for seg in cycle {
                schedule.push(seg);
                total += seg.0;
            }
        }
        MotionProfile {
            schedule,
            telemetry_rate: 10.0,
            csi_rate: 20.0,
            csi_drop_prob: 0.1,
            interference_prob: 0.03,
            tof_dropout_prob: 0.01,
        }
    }

    pub fn duration(&self) -> f64 {
        self.schedule.iter().map(|s| s.0).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || self.schedule.iter().any(|s| !(s.0 > 0.0 && s.0.is_finite())) {
            return Err(Error::Config("schedule needs segments with positive durations".into()));
        }
        if !(self.telemetry_rate > 0.0 && self.csi_rate > 0.0) {
            return Err(Error::Config("rates must be positive".into()));
        }
        for p in [self.csi_drop_prob, self.interference_prob, self.tof_dropout_prob] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Segment index and time into it; clamps to the last segment.
    fn locate(&self, t: f64) -> (usize, f64) {
        let mut start = 0.0;
        for (i, (d, _)) in self.schedule.iter().enumerate() {
            if t < start + d {
                return (i, t - start);
            }
            start += d;
        }
        let last = self.schedule.len() - 1;
        (last, self.schedule[last].0)
    }
}

/// Noise-free kinematic state at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdealState {
    /// Specific force in m/s², gravity on +z.
    pub accel: [f64; 3],
    /// Metres above the take-off point.
    pub altitude: f64,
    /// Degrees.
    pub yaw: f64,
    pub airborne: bool,
}

/// Displacement of a half-sine velocity pulse of length `dur` after `tau` seconds.
fn pulse_displacement(tau: f64, dur: f64) -> f64 {
    MANEUVER_SPEED * dur / PI * (1.0 - math::cos(PI * tau / dur))
}

fn pulse_accel(tau: f64, dur: f64) -> f64 {
    MANEUVER_SPEED * PI / dur * math::cos(PI * tau / dur)
}

/// The scripted flight without turbulence or sensor effects.
pub fn ideal_state(profile: &MotionProfile, t: f64) -> IdealState {
    let (seg, tau) = profile.locate(t);
    let mut altitude = 0.0;
    let mut yaw = 0.0;
    for &(d, m) in &profile.schedule[..seg] {
        match m {
            Maneuver::Up => altitude += pulse_displacement(d, d),
            Maneuver::Down => altitude -= pulse_displacement(d, d),
            Maneuver::Rotate => yaw += YAW_RATE * d,
            _ => {}
        }
    }
    let (dur, m) = profile.schedule[seg];
    let mut accel = [0.0, 0.0, GRAVITY];
    match m {
        Maneuver::Up => {
            accel[2] += pulse_accel(tau, dur);
            altitude += pulse_displacement(tau, dur);
        }
        Maneuver::Down => {
            accel[2] -= pulse_accel(tau, dur);
            altitude -= pulse_displacement(tau, dur);
        }
        Maneuver::Left => accel[1] += pulse_accel(tau, dur),
        Maneuver::Right => accel[1] -= pulse_accel(tau, dur),
        Maneuver::Rotate => yaw += YAW_RATE * tau,
        Maneuver::Stationary | Maneuver::Hover => {}
    }
    IdealState {
        accel,
        altitude,
        yaw: wrap_degrees(yaw),
        airborne: m != Maneuver::Stationary,
    }
}

fn wrap_degrees(d: f64) -> f64 {
    d - 360.0 * math::ceil((d - 180.0) / 360.0)
}

/// Wraps radians into `(-π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    x - TAU * math::ceil((x - PI) / TAU)
}

/// Fleet-wide slowly varying channel term, identical for every device.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    components: Vec<(f64, f64, f64, f64)>,
}

impl Environment {
    /// `rms` is the approximate per-subcarrier amplitude in radians.
    pub fn new(seed: u64, rms: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let components = (0..3)
            .map(|_| {
                let amp = rms * gauss(&mut rng) * 0.8;
                let freq = rng.random_range(0.5..2.5);
                let drift = rng.random_range(0.05..0.4);
                (amp, freq, drift, rng.random_range(0.0..TAU))
            })
            .collect();
        Environment { components }
    }

    pub fn phase(&self, index: i32, span: f64, t: f64) -> f64 {
        self.components
            .iter()
            .map(|&(a, f, w, p)| a * math::sin(PI * f * index as f64 / span + w * t + p))
            .sum()
    }
}

/// Raw streams of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceStreams {
    pub csi: Vec<CsiMeasurement>,
    pub telemetry: Vec<TelemetryFrame>,
}

/// Accelerometer, attitude, barometer and ToF readings from the ideal state.
pub fn telemetry_frame(
    dev: &DeviceImperfection,
    state: &IdealState,
    t: f64,
    turbulence: [f64; 3],
    noise: [f64; 6],
    tof_saturated: bool,
) -> TelemetryFrame {
    let ideal = [
        state.accel[0] + turbulence[0],
        state.accel[1] + turbulence[1],
        state.accel[2] + turbulence[2],
    ];
    let raw = dev.accelerometer(ideal);
    let s = dev.sensor_noise_std;
    let acc = [raw[0] + s * noise[0], raw[1] + s * noise[1], raw[2] + s * noise[2]];
    let pitch = math::atan2(-acc[0], math::sqrt(acc[1] * acc[1] + acc[2] * acc[2])).to_degrees();
    let roll = math::atan2(acc[1], acc[2]).to_degrees();
    let yaw = state.yaw + 5.0 * s * noise[3];
    let baro = state.altitude + dev.baro_offset + 2.0 * s * noise[4];
    let tof = if tof_saturated {
        DEFAULT_TOF_SENTINEL
    } else {
        // ToF ranges from the fuselage to the ground, 10 cm at rest
        10.0 + 100.0 * state.altitude + dev.tof_offset + 20.0 * s * noise[5]
    };
    TelemetryFrame {
        timestamp: t,
        values: [pitch, roll, yaw, acc[0], acc[1], acc[2], baro, tof],
    }
}

/// Generates raw CSI and telemetry streams for every device.
///
/// Each device gets its own random stream derived from `seed`, so adding a
/// device does not change the others.
pub fn synth_generate(
    devices: &[DeviceImperfection],
    profile: &MotionProfile,
    environment: &Environment,
    seed: u64,
) -> Result<Vec<DeviceStreams>> {
    profile.validate()?;
    let Some(first) = devices.first() else {
        return Ok(Vec::new());
    };
    let k = first.num_subcarriers();
    for d in devices {
        if d.num_subcarriers() != k {
            return Err(Error::InvalidInput("devices disagree on subcarrier count".into()));
        }
        d.validate()?;
    }
    let indices = standard_subcarriers(k);
    let span = indices.iter().map(|i| i.unsigned_abs()).max().unwrap_or(1) as f64;
    let duration = profile.duration();
    let turbulence = Normal::new(0.0, TURBULENCE_STD).map_err(|e| Error::Config(format!("{e}")))?;

    let mut out = Vec::with_capacity(devices.len());
    for (d, dev) in devices.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(d as u64);

        let n_tel = math::floor(duration * profile.telemetry_rate) as usize;
        let mut telemetry = Vec::with_capacity(n_tel);
        for n in 0..n_tel {
            let t = n as f64 / profile.telemetry_rate;
            let state = ideal_state(profile, t);
            let turb = if state.airborne {
                core::array::from_fn(|_| turbulence.sample(&mut rng))
            } else {
                [0.0; 3]
            };
            let noise: [f64; 6] = core::array::from_fn(|_| gauss(&mut rng));
            let saturated = rng.random_bool(profile.tof_dropout_prob);
            telemetry.push(telemetry_frame(dev, &state, t, turb, noise, saturated));
        }

        let mut csi = Vec::new();
        let mut t = rng.random_range(0.0..1.0 / profile.csi_rate);
        while t < duration {
            let offset = rng.random_range(-PI..PI);
            let slope = rng.random_range(-0.5..0.5);
            let interfered = rng.random_bool(profile.interference_prob);
            let comb = rng.random_range(1.2..1.3);
            let phases = indices
                .iter()
                .zip(&dev.phase_signature)
                .map(|(&i, sig)| {
                    let mut p = offset + slope * i as f64 + sig + environment.phase(i, span, t);
                    p += dev.phase_noise_std * gauss(&mut rng);
                    if interfered {
                        p += if i % 2 == 0 { comb } else { -comb };
                    }
                    wrap_phase(p)
                })
                .collect();
            let keep = !rng.random_bool(profile.csi_drop_prob);
            if keep {
                csi.push(CsiMeasurement::new(t, phases, indices.clone())?);
            }
            t += rng.random_range(0.5..1.5) / profile.csi_rate;
        }
        out.push(DeviceStreams { csi, telemetry });
    }
    Ok(out)
}

/// Settings for a complete synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthSpec {
    pub fleet: FleetSpec,
    pub samples_per_device: usize,
    /// RMS of the shared environment phase term.
    pub environment_rms: f64,
    pub csi_rate: f64,
    pub csi_drop_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            fleet: FleetSpec::default(),
            samples_per_device: 300,
            environment_rms: 0.1,
            csi_rate: 20.0,
            csi_drop_prob: 0.1,
        }
    }
}

/// Fleet, raw streams and preprocessed samples (`samples_per_device` per device).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub devices: Vec<(String, DeviceImperfection)>,
    pub samples: Vec<AlignedSample>,
}

/// Generates a fleet and flies it long enough for `samples_per_device`
/// samples of `sample_len` frames each.
pub fn synth_streams(
    spec: &SynthSpec,
    sample_len: usize,
    seed: u64,
) -> Result<(Vec<(String, DeviceImperfection)>, Vec<DeviceStreams>)> {
    let devices = generate_fleet(&spec.fleet, seed)?;
    // a little extra flight time covers frames lost to outlier removal
    let frames = (spec.samples_per_device * sample_len) as f64 * 1.1 + 2.0 * sample_len as f64;
    let mut profile = MotionProfile::standard(frames / 10.0);
    profile.csi_rate = spec.csi_rate;
    profile.csi_drop_prob = spec.csi_drop_prob;
    let env = Environment::new(seed, spec.environment_rms);
    let imperfections: Vec<DeviceImperfection> = devices.iter().map(|(_, d)| d.clone()).collect();
    let streams = synth_generate(&imperfections, &profile, &env, seed.wrapping_add(1))?;
    Ok((devices, streams))
}

/// Generates a fleet, flies it and preprocesses every device's streams.
pub fn synth_dataset(spec: &SynthSpec, preprocess: &PreprocessConfig, seed: u64) -> Result<SynthDataset> {
    let (devices, streams) = synth_streams(spec, preprocess.sample_len, seed)?;

    let mut samples = Vec::with_capacity(spec.samples_per_device * devices.len());
    for ((id, _), s) in devices.iter().zip(&streams) {
        let (mut got, _) = signal::preprocess(&s.csi, &s.telemetry, preprocess, Some(id))?;
        if got.len() < spec.samples_per_device {
            return Err(Error::Data(format!(
                "device {id} produced {} samples, {} requested",
                got.len(),
                spec.samples_per_device
            )));
        }
        got.truncate(spec.samples_per_device);
        samples.extend(got);
    }
    Ok(SynthDataset { devices, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{extract_phase_error, unwrap_phases, TelemetryField};

    fn quiet_profile(duration: f64, m: Maneuver) -> MotionProfile {
        MotionProfile {
            schedule: vec![(duration, m)],
            telemetry_rate: 10.0,
            csi_rate: 20.0,
            csi_drop_prob: 0.0,
            interference_prob: 0.0,
            tof_dropout_prob: 0.0,
        }
    }

    fn accel(f: &TelemetryFrame) -> [f64; 3] {
        f.acc()
    }

    #[test]
    fn ideal_device_reports_gravity_exactly() {
        let dev = DeviceImperfection::ideal(52);
        let env = Environment::new(0, 0.0);
        let s = synth_generate(&[dev], &quiet_profile(2.0, Maneuver::Stationary), &env, 9).unwrap();
        assert_eq!(s[0].telemetry.len(), 20);
        for f in &s[0].telemetry {
            assert_eq!(accel(f), [0.0, 0.0, GRAVITY]);
            assert_eq!(f.pitch(), 0.0);
            assert_eq!(f.roll(), 0.0);
        }
    }

    #[test]
    fn bias_only_device_is_offset_by_its_bias() {
        let mut dev = DeviceImperfection::ideal(52);
        dev.bias = [0.1, -0.2, 0.05];
        let env = Environment::new(0, 0.0);
        let s = synth_generate(&[dev.clone()], &quiet_profile(1.0, Maneuver::Stationary), &env, 3).unwrap();
        for f in &s[0].telemetry {
            let a = accel(f);
            assert!((a[0] - 0.1).abs() < 1e-12);
            assert!((a[1] + 0.2).abs() < 1e-12);
            assert!((a[2] - (GRAVITY + 0.05)).abs() < 1e-12);
        }
        // with scale and coupling the offset goes through the same map
        dev.scale = [1.1, 0.9, 1.02];
        dev.cross_axis[0][2] = 0.03;
        let o = dev.accelerometer([0.0, 0.0, GRAVITY]);
        let expect_x = 1.1 * (0.1 + 0.03 * (GRAVITY + 0.05));
        assert!((o[0] - expect_x).abs() < 1e-12);
        assert!((o[1] - 0.9 * -0.2).abs() < 1e-12);
        assert!((o[2] - 1.02 * (GRAVITY + 0.05)).abs() < 1e-12);
    }

    #[test]
    fn extracted_phase_error_recovers_the_signature() {
        let spec = FleetSpec {
            num_devices: 2,
            ..FleetSpec::default()
        };
        let fleet = generate_fleet(&spec, 4).unwrap();
        let devs: Vec<DeviceImperfection> = fleet.iter().map(|(_, d)| d.clone()).collect();
        for d in &devs {
            d.validate().unwrap();
        }
        let mut profile = quiet_profile(30.0, Maneuver::Hover);
        profile.csi_drop_prob = 0.2;
        let env = Environment::new(4, 0.0);
        let streams = synth_generate(&devs, &profile, &env, 5).unwrap();
        for (dev, s) in devs.iter().zip(&streams) {
            let mut mean = vec![0.0; 52];
            for m in &s.csi {
                let unwrapped = CsiMeasurement {
                    phases: unwrap_phases(&m.phases).unwrap(),
                    ..m.clone()
                };
                let e = extract_phase_error(&unwrapped).unwrap();
                for (acc, v) in mean.iter_mut().zip(&e.errors) {
                    *acc += v / s.csi.len() as f64;
                }
            }
            // noise std ≤ 0.25 over ~480 frames: standard error ≈ 0.012
            let worst = mean
                .iter()
                .zip(&dev.phase_signature)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 0.06, "worst deviation {worst}");
        }
        let gap: f64 = devs[0]
            .phase_signature
            .iter()
            .zip(&devs[1].phase_signature)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(gap > 1.0);
    }

    #[test]
    fn interference_frames_are_filtered() {
        let dev = generate_fleet(
            &FleetSpec {
                num_devices: 1,
                ..FleetSpec::default()
            },
            1,
        )
        .unwrap()
        .remove(0)
        .1;
        let mut profile = quiet_profile(20.0, Maneuver::Hover);
        let env = Environment::new(1, 0.1);
        let clean = synth_generate(&[dev.clone()], &profile, &env, 2).unwrap().remove(0);
        profile.interference_prob = 0.999;
        let noisy = synth_generate(&[dev], &profile, &env, 2).unwrap().remove(0);
        let cfg = PreprocessConfig::default();
        let unwrap = |v: &[CsiMeasurement]| -> Vec<CsiMeasurement> {
            v.iter()
                .map(|m| CsiMeasurement {
                    phases: unwrap_phases(&m.phases).unwrap(),
                    ..m.clone()
                })
                .collect()
        };
        assert_eq!(signal::filter_csi(&unwrap(&clean.csi), &cfg).len(), clean.csi.len());
        assert!(signal::filter_csi(&unwrap(&noisy.csi), &cfg).len() < noisy.csi.len() / 50);
    }

    #[test]
    fn ideal_devices_are_statistically_indistinguishable() {
        // two-sample z-test on every telemetry field and the mean phase error,
        // Bonferroni-corrected to an overall α of 0.01
        let fields = TelemetryField::COUNT + 1;
        let trials = 5;
        let z_crit = 3.66; // two-sided, α = 0.01 / 45
        for trial in 0..trials {
            let mut dev = DeviceImperfection::ideal(52);
            dev.phase_noise_std = 0.2;
            dev.sensor_noise_std = 0.05;
            let profile = MotionProfile::standard(60.0);
            let env = Environment::new(trial, 0.1);
            let s = synth_generate(&[dev.clone(), dev], &profile, &env, 100 + trial).unwrap();
            let cfg = PreprocessConfig::default();
            let series = |st: &DeviceStreams| -> Vec<Vec<f64>> {
                let (samples, _) = signal::preprocess(&st.csi, &st.telemetry, &cfg, None).unwrap();
                let mut cols = vec![Vec::new(); fields];
                for smp in &samples {
                    for r in 0..smp.sample_len() {
                        for (f, col) in cols.iter_mut().take(TelemetryField::COUNT).enumerate() {
                            col.push(smp.mems.get(r, f));
                        }
                        cols[TelemetryField::COUNT].push(math::mean(smp.rf.row(r)));
                    }
                }
                cols
            };
            let (a, b) = (series(&s[0]), series(&s[1]));
            for f in 0..fields {
                let (ma, mb) = (math::mean(&a[f]), math::mean(&b[f]));
                let va = math::population_variance(&a[f]) / a[f].len() as f64;
                let vb = math::population_variance(&b[f]) / b[f].len() as f64;
                let se = math::sqrt(va + vb);
                if se > 0.0 {
                    assert!(((ma - mb) / se).abs() < z_crit, "trial {trial} field {f}");
                } else {
                    assert_eq!(ma, mb);
                }
            }
        }
    }

    #[test]
    fn dropped_csi_still_aligns_to_every_telemetry_frame() {
        let dev = generate_fleet(
            &FleetSpec {
                num_devices: 1,
                ..FleetSpec::default()
            },
            8,
        )
        .unwrap()
        .remove(0)
        .1;
        for (seed, drop) in [(1, 0.5), (2, 0.8), (3, 0.95)] {
            let mut profile = MotionProfile::standard(20.0);
            profile.csi_drop_prob = drop;
            profile.tof_dropout_prob = 0.0;
            profile.interference_prob = 0.0;
            let env = Environment::new(seed, 0.1);
            let s = synth_generate(&[dev.clone()], &profile, &env, seed).unwrap().remove(0);
            if s.csi.is_empty() {
                continue;
            }
            let errors: Vec<_> = s
                .csi
                .iter()
                .map(|m| {
                    extract_phase_error(&CsiMeasurement {
                        phases: unwrap_phases(&m.phases).unwrap(),
                        ..m.clone()
                    })
                    .unwrap()
                })
                .collect();
            let aligned = signal::align_interpolate(&errors, &s.telemetry).unwrap();
            assert_eq!(aligned.len(), s.telemetry.len());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            samples_per_device: 20,
            fleet: FleetSpec {
                num_devices: 3,
                ..FleetSpec::default()
            },
            ..SynthSpec::default()
        };
        let a = synth_dataset(&spec, &PreprocessConfig::default(), 17).unwrap();
        let b = synth_dataset(&spec, &PreprocessConfig::default(), 17).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.len(), 60);
        let c = synth_dataset(&spec, &PreprocessConfig::default(), 18).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn profile_kinematics() {
        let p = MotionProfile::standard(30.0);
        // up then down returns to the ground level
        let cycle: f64 = p.schedule.iter().take(8).map(|s| s.0).sum();
        assert!(ideal_state(&p, cycle).altitude.abs() < 1e-12);
        let up_end = ideal_state(&p, 10.0);
        assert!((up_end.altitude - 2.0 * MANEUVER_SPEED * 3.0 / PI).abs() < 1e-9);
        assert_eq!(ideal_state(&p, 0.5).accel, [0.0, 0.0, GRAVITY]);
        assert!(!ideal_state(&p, 0.5).airborne);
        assert!((wrap_degrees(190.0) + 170.0).abs() < 1e-12);
        assert!((wrap_phase(3.5) - (3.5 - TAU)).abs() < 1e-12);
        assert_eq!(wrap_phase(PI), PI);
    }
}
