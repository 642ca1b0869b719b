//! End-to-end runs: split, train, register, evaluate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel, FusionParams};
use crate::metric::{self, Clock, EpochRecord, MsLossConfig, TrainConfig, TrainHistory};
use crate::ocsvm::{OcSvmConfig, UavRegistry};
use crate::signal::AlignedSample;

use super::eval::{self, EvalReport, NearestCentroid, Pipeline, RoundSpec};
use super::split::{self, group_by_device};

/// Everything an experiment needs besides the data.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub loss: MsLossConfig,
    pub ocsvm: OcSvmConfig,
    /// Seeds the split, the weight initialization and the replay draws;
    /// training uses `train.seed`.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.ocsvm.validate()
    }
}

/// FNV-1a over the parameter bits, as 16 hex digits.
pub fn param_fingerprint(params: &FusionParams) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in params.tensors() {
        for b in name
            .bytes()
            .chain(t.data().iter().flat_map(|x| x.to_bits().to_le_bytes()))
        {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Standard architecture sized for the given samples.
pub fn fusion_config_for(samples: &[AlignedSample], seed: u64) -> Result<FusionConfig> {
    let first = samples.first().ok_or_else(|| Error::Data("no samples".into()))?;
    Ok(FusionConfig {
        seed,
        ..FusionConfig::standard(first.num_subcarriers(), first.sample_len())
    })
}

/// Fits one one-class model per device on its embeddings.
pub fn build_registry(model: &FusionModel, enrol: &[AlignedSample], cfg: &OcSvmConfig) -> Result<UavRegistry> {
    let mut registry = UavRegistry::new(param_fingerprint(&model.params), *cfg)?;
    let groups = group_by_device(enrol)?;
    let mut by_id: BTreeMap<String, Vec<AlignedSample>> = BTreeMap::new();
    for (id, members) in groups {
        by_id.insert(id, members.into_iter().cloned().collect());
    }
    for (id, members) in &by_id {
        let emb = model.embed_all(members)?;
        registry.register(id, &emb, false)?;
    }
    Ok(registry)
}

/// Trains the fusion model and registers every training device, enrolling
/// each from its training and validation embeddings.
pub fn train_pipeline(
    train: &[AlignedSample],
    val: &[AlignedSample],
    cfg: &ExperimentConfig,
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Pipeline, TrainHistory)> {
    cfg.validate()?;
    let model = FusionModel::new(fusion_config_for(train, cfg.seed)?)?;
    let (model, history) = metric::train_with_progress(model, train, val, &cfg.train, &cfg.loss, clock, on_epoch)?;
    let enrol: Vec<AlignedSample> = train.iter().chain(val).cloned().collect();
    let registry = build_registry(&model, &enrol, &cfg.ocsvm)?;
    Ok((Pipeline { model, registry }, history))
}

#[derive(Debug, Clone)]
pub struct ClosedWorldOutcome {
    pub pipeline: Pipeline,
    pub history: TrainHistory,
    pub report: EvalReport,
    /// Nearest-centroid cosine accuracy on the same split.
    pub baseline_accuracy: f64,
}

pub fn run_closed_world(
    samples: &[AlignedSample],
    cfg: &ExperimentConfig,
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<ClosedWorldOutcome> {
    let parts = split::split_closed(samples, cfg.seed)?;
    let baseline = NearestCentroid::fit(&parts.train)?.accuracy(&parts.test)?;
    let (pipeline, history) = train_pipeline(&parts.train, &parts.val, cfg, clock, on_epoch)?;
    let report = eval::evaluate_closed(&pipeline, &parts.test, cfg.seed)?;
    Ok(ClosedWorldOutcome {
        pipeline,
        history,
        report,
        baseline_accuracy: baseline,
    })
}

#[derive(Debug, Clone)]
pub struct OpenWorldOutcome {
    pub rounds: Vec<(RoundSpec, EvalReport)>,
    /// Round means with the per-round table attached.
    pub summary: EvalReport,
}

/// Retrains and re-registers from scratch for every round.
pub fn run_open_world(
    samples: &[AlignedSample],
    rounds: &[RoundSpec],
    cfg: &ExperimentConfig,
    clock: &dyn Clock,
    on_round: &mut dyn FnMut(usize, &EvalReport),
) -> Result<OpenWorldOutcome> {
    let devices: Vec<String> = group_by_device(samples)?.into_keys().collect();
    eval::validate_rounds(rounds, &devices)?;
    let mut results = Vec::with_capacity(rounds.len());
    for (r, spec) in rounds.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(r as u64);
        let parts = split::split_open(samples, &spec.impostors, seed)?;
        let round_cfg = ExperimentConfig { seed, ..cfg.clone() };
        let (pipeline, _) = train_pipeline(&parts.train, &parts.val, &round_cfg, clock, &mut |_| {})?;
        let report = eval::evaluate_open_round(&pipeline, &parts.test, &parts.impostors)?;
        on_round(r + 1, &report);
        results.push((spec.clone(), report));
    }
    let summary = eval::summarize_open(&results)?;
    Ok(OpenWorldOutcome {
        rounds: results,
        summary,
    })
}
