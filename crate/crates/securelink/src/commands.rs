//! Subcommands. Each one loads its inputs, calls one library operation and
//! writes its outputs to the paths it was given.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use securelink_core::fusion::FusionModel;
use securelink_core::harness::eval::{self, default_rounds, Pipeline};
use securelink_core::harness::{experiment, split, synth};
use securelink_core::metric::{self, Clock, EpochRecord};
use securelink_core::ocsvm::{Decision, UavRegistry};
use securelink_core::signal::{self, AlignedSample};

use crate::artifacts::{
    self, Checkpoint, RegistryFile, ReportFile, ReportKind, SampleRecord, REGISTRY_VERSION, REPORT_VERSION,
};
use crate::config::{CliConfig, Overrides, World};
use crate::error::{exit, CliError, Result};
use crate::ingest::{self, CsvMapping, Recording};
use crate::runtime::{self, PipelineStages};

#[derive(Debug, Parser)]
#[command(
    name = "securelink",
    version,
    about = "Cross-layer UAV authentication from CSI phase errors and MEMS telemetry"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fly a synthetic fleet and write its raw recordings.
    Synth(SynthArgs),
    /// Turn raw recordings into aligned samples.
    Preprocess(PreprocessArgs),
    /// Split a sample file into train/val/test (and impostor) files.
    Split(SplitArgs),
    /// Train the fusion network and write a checkpoint.
    Train(TrainArgs),
    /// Fit one-class models for every device in the enrolment data.
    Register(RegisterArgs),
    /// Verify one sample against a claimed identity.
    Authenticate(AuthenticateArgs),
    /// Score a test set and write a report.
    Evaluate(EvaluateArgs),
    /// Run the full closed- or open-world protocol.
    Experiment(ExperimentArgs),
    /// Print a saved report.
    Report(ReportArgs),
    /// Measure per-stage verification latency.
    Runtime(RuntimeArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Raw recording output (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub devices: Option<usize>,
    #[arg(long)]
    pub samples_per_device: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Raw recording (JSONL) with CSI and, unless --telemetry-csv is given, telemetry.
    #[arg(long)]
    pub input: PathBuf,
    /// Telemetry CSV to pair with the CSI records of --input.
    #[arg(long)]
    pub telemetry_csv: Option<PathBuf>,
    /// Column naming of --telemetry-csv: `canonical` or `tello`.
    #[arg(long, default_value = "canonical")]
    pub csv_preset: String,
    /// Device id for records that carry none.
    #[arg(long)]
    pub device_id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub world: Option<World>,
    /// Impostor device ids (open world).
    #[arg(long, value_delimiter = ',')]
    pub impostors: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Enrolment sample files; repeat for several.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuthenticateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Line of the sample to verify, counting samples from 0.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Identity to verify; defaults to the sample's own claim.
    #[arg(long, env = "SECURELINK_CLAIMED_ID")]
    pub claimed_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Genuine test samples.
    #[arg(long)]
    pub data: PathBuf,
    /// Impostor samples with claimed ids; switches to the open-world report.
    #[arg(long)]
    pub impostors: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Sample file; a synthetic fleet is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub world: Option<World>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RuntimeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Raw recording (JSONL) to cut into verification windows.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = runtime::MIN_ITERATIONS)]
    pub iterations: usize,
}

/// Wall clock for epoch timings.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Where commands print; stdout for the binary, a buffer in tests.
pub struct Context<'a> {
    pub config: CliConfig,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

impl Context<'_> {
    fn say(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.out, "{}", line.as_ref());
    }

    fn note(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.err, "{}", line.as_ref());
    }
}

fn resolve(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} path given (flag or [paths] config)")))
}

/// Runs one command and returns the process exit code.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8> {
    let config = CliConfig::load(&cli.overrides)?;
    let mut ctx = Context { config, out, err };
    match &cli.command {
        Command::Synth(a) => cmd_synth(&mut ctx, a),
        Command::Preprocess(a) => cmd_preprocess(&mut ctx, a),
        Command::Split(a) => cmd_split(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Register(a) => cmd_register(&mut ctx, a),
        Command::Authenticate(a) => cmd_authenticate(&mut ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&mut ctx, a),
        Command::Experiment(a) => cmd_experiment(&mut ctx, a),
        Command::Report(a) => cmd_report(&mut ctx, a),
        Command::Runtime(a) => cmd_runtime(&mut ctx, a),
        Command::Config => {
            let text = toml::to_string(&ctx.config).map_err(|e| CliError::Usage(e.to_string()))?;
            ctx.say(text.trim_end());
            Ok(exit::SUCCESS)
        }
    }
}

pub fn cmd_synth(ctx: &mut Context, a: &SynthArgs) -> Result<u8> {
    let out = resolve(&a.out, &ctx.config.paths.data, "output")?;
    let mut spec = ctx.config.synth.clone();
    if let Some(n) = a.devices {
        spec.fleet.num_devices = n;
    }
    if let Some(n) = a.samples_per_device {
        spec.samples_per_device = n;
    }
    let (devices, streams) = synth::synth_streams(&spec, ctx.config.preprocess.sample_len, ctx.config.seed)?;
    let recordings: ingest::Recordings = devices
        .iter()
        .zip(streams)
        .map(|((id, _), s)| {
            (
                Some(id.clone()),
                Recording {
                    csi: s.csi,
                    telemetry: s.telemetry,
                },
            )
        })
        .collect();
    ingest::write_jsonl(&out, &recordings)?;
    ctx.say(format!("wrote {} devices to {}", devices.len(), out.display()));
    Ok(exit::SUCCESS)
}

pub fn cmd_preprocess(ctx: &mut Context, a: &PreprocessArgs) -> Result<u8> {
    let out = resolve(&a.out, &ctx.config.paths.data, "output")?;
    let cfg = ctx.config.preprocess_config()?;
    let mut recordings = ingest::read_jsonl(&a.input)?;
    if let Some(csv) = &a.telemetry_csv {
        let mapping = CsvMapping::preset(&a.csv_preset)
            .ok_or_else(|| CliError::Usage(format!("unknown CSV preset `{}`", a.csv_preset)))?;
        let frames = ingest::read_telemetry_csv(csv, &mapping)?;
        if recordings.len() > 1 {
            return Err(CliError::Usage(
                "--telemetry-csv pairs with a single-device recording".into(),
            ));
        }
        let key = recordings.keys().next().cloned().unwrap_or(None);
        recordings.entry(key).or_default().telemetry = frames;
    }
    let mut records = Vec::new();
    for (id, rec) in &recordings {
        let id = id.as_deref().or(a.device_id.as_deref());
        let (samples, summary) = signal::preprocess(&rec.csi, &rec.telemetry, &cfg, id)?;
        let name = id.unwrap_or("<unnamed>");
        ctx.note(format!(
            "{name}: {} CSI frames ({} filtered), {} telemetry frames ({} outliers), {} samples",
            summary.csi_frames_read,
            summary.csi_frames_filtered,
            summary.telemetry_frames_read,
            summary.telemetry_outliers_dropped,
            summary.samples_emitted
        ));
        if summary.samples_emitted == 0 {
            ctx.note(format!("warning: {name} produced no samples"));
        }
        records.extend(samples.into_iter().map(SampleRecord::from));
    }
    artifacts::write_samples(&out, &ctx.config.echo(), &records)?;
    ctx.say(format!("wrote {} samples to {}", records.len(), out.display()));
    Ok(exit::SUCCESS)
}

fn load_samples(path: &Path) -> Result<Vec<AlignedSample>> {
    Ok(artifacts::read_samples(path)?.samples())
}

pub fn cmd_split(ctx: &mut Context, a: &SplitArgs) -> Result<u8> {
    let data = resolve(&a.data, &ctx.config.paths.data, "data")?;
    let samples = load_samples(&data)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let meta = ctx.config.echo();
    let seed = ctx.config.seed;
    let write = |name: &str, records: Vec<SampleRecord>| -> Result<PathBuf> {
        let path = a.out_dir.join(name);
        artifacts::write_samples(&path, &meta, &records)?;
        Ok(path)
    };
    let plain = |v: Vec<AlignedSample>| v.into_iter().map(SampleRecord::from).collect::<Vec<_>>();
    let mut written = Vec::new();
    match a.world.unwrap_or(ctx.config.experiment.world) {
        World::Closed => {
            let parts = split::split_closed(&samples, seed)?;
            written.push(write("train.jsonl", plain(parts.train))?);
            written.push(write("val.jsonl", plain(parts.val))?);
            written.push(write("test.jsonl", plain(parts.test))?);
        }
        World::Open => {
            let parts = split::split_open(&samples, &a.impostors, seed)?;
            written.push(write("train.jsonl", plain(parts.train))?);
            written.push(write("val.jsonl", plain(parts.val))?);
            written.push(write("test.jsonl", plain(parts.test))?);
            let claims = parts
                .impostors
                .into_iter()
                .map(|c| SampleRecord {
                    sample: c.sample,
                    claimed_id: Some(c.claimed_id),
                })
                .collect();
            written.push(write("impostors.jsonl", claims)?);
        }
    }
    for p in written {
        ctx.say(p.display().to_string());
    }
    Ok(exit::SUCCESS)
}

pub fn cmd_train(ctx: &mut Context, a: &TrainArgs) -> Result<u8> {
    let path = resolve(&a.checkpoint, &ctx.config.paths.checkpoint, "checkpoint")?;
    let train = load_samples(&a.train)?;
    let val = load_samples(&a.val)?;
    let cfg = ctx.config.experiment_config();
    let model = FusionModel::new(experiment::fusion_config_for(&train, cfg.seed)?)?;
    let clock = WallClock::new();
    let err = &mut *ctx.err;
    let (model, history) = metric::train_with_progress(
        model,
        &train,
        &val,
        &cfg.train,
        &cfg.loss,
        &clock,
        &mut |r: &EpochRecord| {
            let _ = writeln!(
                err,
                "epoch {:>3}  train {:.6}  val {:.6}  {:.1}s",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.wall_ms / 1e3
            );
        },
    )?;
    ctx.note(format!(
        "best epoch {} (val {:.6})",
        history.best_epoch, history.best_val_loss
    ));
    let ck = Checkpoint::new(&model, Some(history), ctx.config.echo());
    ck.save(&path)?;
    ctx.say(format!("model {} written to {}", ck.model_version, path.display()));
    Ok(exit::SUCCESS)
}

pub fn cmd_register(ctx: &mut Context, a: &RegisterArgs) -> Result<u8> {
    let ck_path = resolve(&a.checkpoint, &ctx.config.paths.checkpoint, "checkpoint")?;
    let reg_path = resolve(&a.registry, &ctx.config.paths.registry, "registry")?;
    let ck = Checkpoint::load(&ck_path)?;
    let mut enrol = Vec::new();
    for p in &a.data {
        enrol.extend(load_samples(p)?);
    }
    let registry = experiment::build_registry(&ck.model(), &enrol, &ctx.config.ocsvm)?;
    let ids: Vec<&str> = registry.ids().collect();
    ctx.say(format!("registered {} devices: {}", ids.len(), ids.join(", ")));
    RegistryFile {
        version: REGISTRY_VERSION,
        registry,
        config: ctx.config.echo(),
    }
    .save(&reg_path)?;
    ctx.say(format!("registry written to {}", reg_path.display()));
    Ok(exit::SUCCESS)
}

/// Loads a checkpoint and registry and checks they belong together.
fn load_pipeline(ctx: &Context, checkpoint: &Option<PathBuf>, registry: &Option<PathBuf>) -> Result<Pipeline> {
    let ck_path = resolve(checkpoint, &ctx.config.paths.checkpoint, "checkpoint")?;
    let reg_path = resolve(registry, &ctx.config.paths.registry, "registry")?;
    let ck = Checkpoint::load(&ck_path)?;
    let reg: UavRegistry = RegistryFile::load(&reg_path)?.registry;
    if reg.model_version != ck.model_version {
        return Err(CliError::Format {
            path: reg_path,
            message: format!(
                "registry was built with model {}, checkpoint is {}",
                reg.model_version, ck.model_version
            ),
        });
    }
    Ok(Pipeline {
        model: ck.model(),
        registry: reg,
    })
}

pub fn cmd_authenticate(ctx: &mut Context, a: &AuthenticateArgs) -> Result<u8> {
    let pipeline = load_pipeline(ctx, &a.checkpoint, &a.registry)?;
    let file = artifacts::read_samples(&a.data)?;
    let n = file.records.len();
    let record = file
        .records
        .into_iter()
        .nth(a.index)
        .ok_or_else(|| CliError::Usage(format!("--index {} out of range ({n} samples)", a.index)))?;
    let claimed = a
        .claimed_id
        .clone()
        .or(record.claimed_id)
        .or(record.sample.device_id.clone())
        .ok_or_else(|| CliError::Usage("no claimed id: pass --claimed-id".into()))?;
    let g = pipeline
        .model
        .forward_full(&record.sample, securelink_core::fusion::Mode::Eval)?;
    let score = pipeline.registry.score_embedding(&claimed, &g)?;
    let decision = if score >= 0.0 {
        Decision::Accept
    } else {
        Decision::Reject
    };
    match decision {
        Decision::Accept => {
            ctx.say(format!("ACCEPT {claimed} score={score:.6}"));
            Ok(exit::SUCCESS)
        }
        Decision::Reject => {
            ctx.say(format!("REJECT {claimed} score={score:.6}"));
            Ok(exit::REJECT)
        }
    }
}

fn write_report(ctx: &mut Context, file: &ReportFile, out: &Path, confusion_csv: &Option<PathBuf>) -> Result<()> {
    artifacts::write_json(out, file)?;
    if let Some(csv) = confusion_csv {
        artifacts::write_confusion_csv(csv, &file.report)?;
    }
    ctx.note(artifacts::render_table(file));
    ctx.say(out.display().to_string());
    Ok(())
}

pub fn cmd_evaluate(ctx: &mut Context, a: &EvaluateArgs) -> Result<u8> {
    let out = resolve(&a.out, &ctx.config.paths.out, "report")?;
    let pipeline = load_pipeline(ctx, &a.checkpoint, &a.registry)?;
    let test = load_samples(&a.data)?;
    let (kind, report) = match &a.impostors {
        None => (
            ReportKind::Closed,
            eval::evaluate_closed(&pipeline, &test, ctx.config.seed)?,
        ),
        Some(p) => {
            let claims = artifacts::read_samples(p)?
                .records
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    let claimed_id = r.claimed_id.ok_or_else(|| CliError::Format {
                        path: p.clone(),
                        message: format!("sample {i} has no claimed_id"),
                    })?;
                    Ok(securelink_core::harness::ClaimedSample {
                        sample: r.sample,
                        claimed_id,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (ReportKind::Open, eval::evaluate_open_round(&pipeline, &test, &claims)?)
        }
    };
    let file = ReportFile {
        version: REPORT_VERSION,
        kind,
        model_version: Some(pipeline.registry.model_version.clone()),
        report,
        baseline_accuracy: None,
        config: ctx.config.echo(),
    };
    write_report(ctx, &file, &out, &a.confusion_csv)?;
    Ok(exit::SUCCESS)
}

pub fn cmd_experiment(ctx: &mut Context, a: &ExperimentArgs) -> Result<u8> {
    let out = resolve(&a.out, &ctx.config.paths.out, "report")?;
    let cfg = ctx.config.experiment_config();
    let samples = match a.data.as_ref().or(ctx.config.paths.data.as_ref()) {
        Some(p) => load_samples(p)?,
        None => synth::synth_dataset(&ctx.config.synth, &ctx.config.preprocess_config()?, ctx.config.seed)?.samples,
    };
    let clock = WallClock::new();
    let file = match a.world.unwrap_or(ctx.config.experiment.world) {
        World::Closed => {
            let err = &mut *ctx.err;
            let outcome = experiment::run_closed_world(&samples, &cfg, &clock, &mut |r| {
                let _ = writeln!(
                    err,
                    "epoch {:>3}  train {:.6}  val {:.6}",
                    r.epoch, r.train_loss, r.val_loss
                );
            })?;
            ReportFile {
                version: REPORT_VERSION,
                kind: ReportKind::Closed,
                model_version: Some(outcome.pipeline.registry.model_version.clone()),
                report: outcome.report,
                baseline_accuracy: Some(outcome.baseline_accuracy),
                config: ctx.config.echo(),
            }
        }
        World::Open => {
            let plan = if ctx.config.experiment.plan.is_empty() {
                let devices: Vec<String> = split::group_by_device(&samples)?.into_keys().collect();
                default_rounds(
                    &devices,
                    ctx.config.experiment.rounds,
                    ctx.config.experiment.impostors_per_round,
                    cfg.seed,
                )?
            } else {
                ctx.config.experiment.plan.clone()
            };
            let err = &mut *ctx.err;
            let outcome = experiment::run_open_world(&samples, &plan, &cfg, &clock, &mut |r, rep| {
                let _ = writeln!(err, "round {r}: accuracy {:.4}", rep.accuracy);
            })?;
            ReportFile {
                version: REPORT_VERSION,
                kind: ReportKind::Open,
                model_version: None,
                report: outcome.summary,
                baseline_accuracy: None,
                config: ctx.config.echo(),
            }
        }
    };
    write_report(ctx, &file, &out, &a.confusion_csv)?;
    Ok(exit::SUCCESS)
}

pub fn cmd_report(ctx: &mut Context, a: &ReportArgs) -> Result<u8> {
    let file = ReportFile::load(&a.input)?;
    if let Some(csv) = &a.confusion_csv {
        artifacts::write_confusion_csv(csv, &file.report)?;
    }
    ctx.say(artifacts::render_table(&file).trim_end());
    Ok(exit::SUCCESS)
}

pub fn cmd_runtime(ctx: &mut Context, a: &RuntimeArgs) -> Result<u8> {
    let pipeline = load_pipeline(ctx, &a.checkpoint, &a.registry)?;
    let cfg = ctx.config.preprocess_config()?;
    let recordings = ingest::read_jsonl(&a.input)?;
    let windows: Vec<_> = recordings
        .values()
        .flat_map(|r| runtime::raw_windows(&r.csi, &r.telemetry, cfg.sample_len))
        .collect();
    let stages = PipelineStages {
        preprocess: &cfg,
        model: &pipeline.model,
        registry: &pipeline.registry,
    };
    let r = runtime::measure_runtime(&stages, &windows, a.iterations)?;
    ctx.say(format!("{} iterations over {} windows", r.iterations, windows.len()));
    for (stage, ms) in [
        ("preprocessing", r.preprocessing_ms),
        ("fusion", r.fusion_ms),
        ("identification", r.identification_ms),
        ("total", r.total_ms()),
    ] {
        ctx.say(format!("{stage:<15} {ms:>9.3} ms"));
    }
    Ok(exit::SUCCESS)
}
