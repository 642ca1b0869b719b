//! Synthetic data, dataset protocols, metrics and experiment orchestration.

pub mod eval;
pub mod experiment;
pub mod split;
pub mod synth;

pub use eval::{
    evaluate_closed, evaluate_open_round, summarize_open, EvalReport, NearestCentroid, Pipeline, RoundRow, RoundSpec,
    SampleScorer,
};
pub use experiment::{run_closed_world, run_open_world, ExperimentConfig};
pub use split::{split_closed, split_open, ClaimedSample, ClosedSplit, OpenSplit};
pub use synth::{
    generate_fleet, synth_dataset, synth_generate, synth_streams, DeviceImperfection, DeviceStreams, Environment,
    FleetSpec, Maneuver, MotionProfile, SynthSpec,
};
