//! Two-branch fingerprint fusion network.
//!
//! Each modality goes through the same branch structure:
//!
//! ```text
//! BN -> Conv1d(k=3) -> BN -> ReLU -> MaxPool(2) -> Conv1d(k=2) -> BN -> ReLU -> BiLSTM
//! ```
//!
//! turning an `M x F` window into `M/2` feature rows. The RF and MEMS
//! features are concatenated per timestep, passed through two multi-head
//! self-attention layers, flattened, and mapped by a fully connected layer
//! to a unit-norm embedding.
//!
//! Gradients are computed by hand, layer by layer, from the caches recorded
//! on a [`Tape`].

pub mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::signal::{AlignedSample, TelemetryField};

use layers::{AttentionCache, BnCache, ConvCache, EmbeddingCache, LstmCache};
pub use layers::{AttentionLayer, BatchNorm, Conv1d, Embedding, Lstm, Mode, RunningStats};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FusionConfig {
    /// Subcarriers per phase-error frame (`K`).
    pub rf_width: usize,
    pub mems_width: usize,
    /// Frames per sample (`M`), even.
    pub sample_len: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    /// Hidden units per LSTM direction; a branch emits `2 * lstm_hidden` features.
    pub lstm_hidden: usize,
    pub attention_heads: usize,
    pub attention_layers: usize,
    pub embed_dim: usize,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl FusionConfig {
    /// Full-size network: 64-kernel convolutions, 128-wide BiLSTM output,
    /// four-head attention over width 256 and a 256-d embedding.
    pub fn standard(rf_width: usize, sample_len: usize) -> Self {
        FusionConfig {
            rf_width,
            mems_width: TelemetryField::COUNT,
            sample_len,
            conv1_channels: 64,
            conv1_kernel: 3,
            conv2_channels: 64,
            conv2_kernel: 2,
            lstm_hidden: 64,
            attention_heads: 4,
            attention_layers: 2,
            embed_dim: 256,
            bn_momentum: 0.9,
            seed: 0,
        }
    }

    /// Width of the concatenated features seen by attention.
    pub fn model_width(&self) -> usize {
        4 * self.lstm_hidden
    }

    /// Timesteps after pooling.
    pub fn steps(&self) -> usize {
        self.sample_len / 2
    }

    pub fn flat_width(&self) -> usize {
        self.steps() * self.model_width()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rf_width", self.rf_width),
            ("mems_width", self.mems_width),
            ("conv1_channels", self.conv1_channels),
            ("conv1_kernel", self.conv1_kernel),
            ("conv2_channels", self.conv2_channels),
            ("conv2_kernel", self.conv2_kernel),
            ("lstm_hidden", self.lstm_hidden),
            ("attention_heads", self.attention_heads),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.sample_len < 2 || self.sample_len % 2 != 0 {
            return Err(Error::Config(format!(
                "sample_len must be even and >= 2, got {}",
                self.sample_len
            )));
        }
        if self.model_width() % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.model_width(),
                self.attention_heads
            )));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must be in [0, 1), got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Trainable parameters of one unimodal branch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BranchParams {
    pub bn_in: BatchNorm,
    pub conv1: Conv1d,
    pub bn1: BatchNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    pub lstm_fwd: Lstm,
    pub lstm_bwd: Lstm,
}

/// Batch-norm running statistics of one branch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BranchStats {
    pub bn_in: RunningStats,
    pub bn1: RunningStats,
    pub bn2: RunningStats,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FusionParams {
    pub rf: BranchParams,
    pub mems: BranchParams,
    pub attention: Vec<AttentionLayer>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FusionStats {
    pub rf: BranchStats,
    pub mems: BranchStats,
}

impl BranchParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        let items: [(&str, &Matrix); 16] = [
            ("bn_in.gamma", &self.bn_in.gamma),
            ("bn_in.beta", &self.bn_in.beta),
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("bn1.gamma", &self.bn1.gamma),
            ("bn1.beta", &self.bn1.beta),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("bn2.gamma", &self.bn2.gamma),
            ("bn2.beta", &self.bn2.beta),
            ("lstm_fwd.wx", &self.lstm_fwd.wx),
            ("lstm_fwd.wh", &self.lstm_fwd.wh),
            ("lstm_fwd.bias", &self.lstm_fwd.bias),
            ("lstm_bwd.wx", &self.lstm_bwd.wx),
            ("lstm_bwd.wh", &self.lstm_bwd.wh),
            ("lstm_bwd.bias", &self.lstm_bwd.bias),
        ];
        out.extend(items.into_iter().map(|(n, m)| (format!("{prefix}.{n}"), m)));
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 16] {
        [
            &mut self.bn_in.gamma,
            &mut self.bn_in.beta,
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.lstm_fwd.wx,
            &mut self.lstm_fwd.wh,
            &mut self.lstm_fwd.bias,
            &mut self.lstm_bwd.wx,
            &mut self.lstm_bwd.wh,
            &mut self.lstm_bwd.bias,
        ]
    }
}

impl FusionParams {
    /// Every trainable tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.rf.tensors("rf", &mut out);
        self.mems.tensors("mems", &mut out);
        for (i, a) in self.attention.iter().enumerate() {
            out.push((format!("attention{i}.wq"), &a.wq));
            out.push((format!("attention{i}.wk"), &a.wk));
            out.push((format!("attention{i}.wv"), &a.wv));
            out.push((format!("attention{i}.wo"), &a.wo));
        }
        out.push(("embedding.weight".into(), &self.embedding.weight));
        out.push(("embedding.bias".into(), &self.embedding.bias));
        out
    }

    /// Mutable access in the same order as [`FusionParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        out.extend(self.rf.tensors_mut());
        out.extend(self.mems.tensors_mut());
        for a in &mut self.attention {
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
        }
        out.push(&mut self.embedding.weight);
        out.push(&mut self.embedding.bias);
        out
    }

    pub fn zeros_like(&self) -> FusionParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Matrix {
    // variance-preserving fan-in bound: Var = a²/3 = 1/fan_in
    let a = math::sqrt(3.0 / fan_in as f64);
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape by construction")
}

fn init_lstm(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Lstm {
    let mut bias = Matrix::zeros(1, 4 * hidden);
    for j in hidden..2 * hidden {
        bias.data_mut()[j] = 1.0;
    }
    Lstm {
        wx: uniform(input, 4 * hidden, input, rng),
        wh: uniform(hidden, 4 * hidden, hidden, rng),
        bias,
    }
}

fn init_branch(cfg: &FusionConfig, input: usize, rng: &mut ChaCha8Rng) -> (BranchParams, BranchStats) {
    let c1 = cfg.conv1_channels;
    let c2 = cfg.conv2_channels;
    let params = BranchParams {
        bn_in: BatchNorm::new(input),
        conv1: Conv1d {
            weight: uniform(cfg.conv1_kernel * input, c1, cfg.conv1_kernel * input, rng),
            bias: Matrix::zeros(1, c1),
        },
        bn1: BatchNorm::new(c1),
        conv2: Conv1d {
            weight: uniform(cfg.conv2_kernel * c1, c2, cfg.conv2_kernel * c1, rng),
            bias: Matrix::zeros(1, c2),
        },
        bn2: BatchNorm::new(c2),
        lstm_fwd: init_lstm(c2, cfg.lstm_hidden, rng),
        lstm_bwd: init_lstm(c2, cfg.lstm_hidden, rng),
    };
    let stats = BranchStats {
        bn_in: RunningStats::new(input),
        bn1: RunningStats::new(c1),
        bn2: RunningStats::new(c2),
    };
    (params, stats)
}

#[derive(Debug, Clone)]
struct BranchCache {
    bn_in: BnCache,
    conv1: ConvCache,
    bn1: BnCache,
    relu1: Matrix,
    pool: Vec<bool>,
    conv2: ConvCache,
    bn2: BnCache,
    relu2: Matrix,
    lstm_fwd: LstmCache,
    lstm_bwd: LstmCache,
}

#[derive(Debug, Clone)]
struct TapeRecord {
    batch: usize,
    rf: BranchCache,
    mems: BranchCache,
    attention: Vec<AttentionCache>,
    embedding: EmbeddingCache,
}

/// Activations recorded by a forward pass, consumed by [`FusionModel::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    record: Option<TapeRecord>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }

    pub fn clear(&mut self) {
        self.record = None;
    }

    /// Softmax weights of every attention layer, head and sample.
    pub fn attention_weights(&self) -> Vec<&Matrix> {
        self.record
            .iter()
            .flat_map(|r| r.attention.iter().flat_map(|a| a.probs.iter()))
            .collect()
    }
}

/// Runs one branch on a stacked `(n * M) x F` batch.
fn branch_forward_stacked(
    p: &BranchParams,
    stats: &BranchStats,
    cfg: &FusionConfig,
    x: &Matrix,
    mode: Mode,
) -> (Matrix, BranchCache) {
    let m = cfg.sample_len;
    let (a, bn_in) = p.bn_in.forward(x, &stats.bn_in, mode);
    let (a, conv1) = p.conv1.forward(&a, m, cfg.conv1_kernel);
    let (a, bn1) = p.bn1.forward(&a, &stats.bn1, mode);
    let relu1 = layers::relu(&a);
    let (a, pool) = layers::maxpool2(&relu1);
    let (a, conv2) = p.conv2.forward(&a, m / 2, cfg.conv2_kernel);
    let (a, bn2) = p.bn2.forward(&a, &stats.bn2, mode);
    let relu2 = layers::relu(&a);
    let (hf, lstm_fwd) = p.lstm_fwd.forward(&relu2, m / 2, false);
    let (hb, lstm_bwd) = p.lstm_bwd.forward(&relu2, m / 2, true);
    let out = hf.hconcat(&hb).expect("equal rows");
    (
        out,
        BranchCache {
            bn_in,
            conv1,
            bn1,
            relu1,
            pool,
            conv2,
            bn2,
            relu2,
            lstm_fwd,
            lstm_bwd,
        },
    )
}

fn branch_backward(p: &BranchParams, cfg: &FusionConfig, dout: &Matrix, c: &BranchCache, g: &mut BranchParams) {
    let m = cfg.sample_len;
    let h = cfg.lstm_hidden;
    let dhf = dout.slice_cols(0, h);
    let dhb = dout.slice_cols(h, h);
    let mut d = p.lstm_fwd.backward(&dhf, &c.lstm_fwd, m / 2, &mut g.lstm_fwd);
    d.add_assign(&p.lstm_bwd.backward(&dhb, &c.lstm_bwd, m / 2, &mut g.lstm_bwd));
    let d = layers::relu_backward(&d, &c.relu2);
    let d = p.bn2.backward(&d, &c.bn2, &mut g.bn2);
    let d = p.conv2.backward(&d, &c.conv2, m / 2, cfg.conv2_kernel, &mut g.conv2);
    let d = layers::maxpool2_backward(&d, &c.pool);
    let d = layers::relu_backward(&d, &c.relu1);
    let d = p.bn1.backward(&d, &c.bn1, &mut g.bn1);
    let d = p.conv1.backward(&d, &c.conv1, m, cfg.conv1_kernel, &mut g.conv1);
    // input gradient is not needed
    let _ = p.bn_in.backward(&d, &c.bn_in, &mut g.bn_in);
}

fn update_branch_stats(stats: &mut BranchStats, c: &BranchCache, momentum: f64) {
    stats.bn_in.update(&c.bn_in.batch_mean, &c.bn_in.batch_var, momentum);
    stats.bn1.update(&c.bn1.batch_mean, &c.bn1.batch_var, momentum);
    stats.bn2.update(&c.bn2.batch_mean, &c.bn2.batch_var, momentum);
}

/// The complete fusion network: configuration, trainable parameters and
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FusionModel {
    pub config: FusionConfig,
    pub params: FusionParams,
    pub stats: FusionStats,
}

impl FusionModel {
    /// Builds a model with seeded uniform fan-in initialization.
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (rf, rf_stats) = init_branch(&config, config.rf_width, &mut rng);
        let (mems, mems_stats) = init_branch(&config, config.mems_width, &mut rng);
        let d = config.model_width();
        let attention = (0..config.attention_layers)
            .map(|_| AttentionLayer {
                wq: uniform(d, d, d, &mut rng),
                wk: uniform(d, d, d, &mut rng),
                wv: uniform(d, d, d, &mut rng),
                wo: uniform(d, d, d, &mut rng),
            })
            .collect();
        let flat = config.flat_width();
        let embedding = Embedding {
            weight: uniform(flat, config.embed_dim, flat, &mut rng),
            bias: Matrix::zeros(1, config.embed_dim),
        };
        Ok(FusionModel {
            params: FusionParams {
                rf,
                mems,
                attention,
                embedding,
            },
            stats: FusionStats {
                rf: rf_stats,
                mems: mems_stats,
            },
            config,
        })
    }

    /// Checks that parameter shapes agree with the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = FusionModel::new(FusionConfig {
            seed: 0,
            ..self.config.clone()
        })?;
        let ours = self.params.tensors();
        let theirs = reference.params.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                theirs.len(),
                ours.len()
            )));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            if !a.is_finite() {
                return Err(Error::InvalidInput(format!("{name} holds non-finite values")));
            }
        }
        let stats = [&self.stats.rf, &self.stats.mems];
        let ref_stats = [&reference.stats.rf, &reference.stats.mems];
        for (s, r) in stats.iter().zip(ref_stats) {
            for (a, b) in [(&s.bn_in, &r.bn_in), (&s.bn1, &r.bn1), (&s.bn2, &r.bn2)] {
                if a.mean.len() != b.mean.len() || a.var.len() != b.var.len() {
                    return Err(Error::Shape("batch-norm statistics width".into()));
                }
                if a.var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidInput(
                        "batch-norm running variance must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn stack_inputs(&self, samples: &[&AlignedSample]) -> Result<(Matrix, Matrix)> {
        let cfg = &self.config;
        let m = cfg.sample_len;
        let mut rf = Matrix::zeros(samples.len() * m, cfg.rf_width);
        let mut mems = Matrix::zeros(samples.len() * m, cfg.mems_width);
        for (s, sample) in samples.iter().enumerate() {
            if sample.rf.shape() != (m, cfg.rf_width) || sample.mems.shape() != (m, cfg.mems_width) {
                return Err(Error::Shape(format!(
                    "sample {s}: expected rf {m}x{} and mems {m}x{}, got {:?} and {:?}",
                    cfg.rf_width,
                    cfg.mems_width,
                    sample.rf.shape(),
                    sample.mems.shape()
                )));
            }
            rf.data_mut()[s * m * cfg.rf_width..(s + 1) * m * cfg.rf_width].copy_from_slice(sample.rf.data());
            mems.data_mut()[s * m * cfg.mems_width..(s + 1) * m * cfg.mems_width].copy_from_slice(sample.mems.data());
        }
        Ok((rf, mems))
    }

    /// Embeds a batch, one unit-norm row per sample. When `tape` is given,
    /// the activations needed by [`FusionModel::backward`] are recorded on it.
    pub fn forward_batch(&self, samples: &[&AlignedSample], mode: Mode, tape: Option<&mut Tape>) -> Result<Matrix> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let cfg = &self.config;
        let (rf_in, mems_in) = self.stack_inputs(samples)?;
        let (x, rf) = branch_forward_stacked(&self.params.rf, &self.stats.rf, cfg, &rf_in, mode);
        let (y, mems) = branch_forward_stacked(&self.params.mems, &self.stats.mems, cfg, &mems_in, mode);
        let mut u = x.hconcat(&y)?;
        let mut attention = Vec::with_capacity(self.params.attention.len());
        for layer in &self.params.attention {
            let (out, cache) = layer.forward(&u, cfg.steps(), cfg.attention_heads)?;
            attention.push(cache);
            u = out;
        }
        let flat = u.reshape(samples.len(), cfg.flat_width())?;
        let (g, embedding) = self.params.embedding.forward(&flat)?;
        if let Some(tape) = tape {
            tape.record = Some(TapeRecord {
                batch: samples.len(),
                rf,
                mems,
                attention,
                embedding,
            });
        }
        Ok(g)
    }

    /// Embedding of a single sample.
    pub fn forward_full(&self, sample: &AlignedSample, mode: Mode) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&[sample], mode, None)?.into_data())
    }

    /// Eval-mode embeddings for many samples, computed in chunks.
    pub fn embed_all(&self, samples: &[AlignedSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let refs: Vec<&AlignedSample> = chunk.iter().collect();
            let g = self.forward_batch(&refs, Mode::Eval, None)?;
            out.extend(g.iter_rows().map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Parameter gradients given the loss gradient with respect to the
    /// embeddings of the batch recorded on `tape`.
    pub fn backward(&self, tape: &Tape, d_embeddings: &Matrix) -> Result<FusionParams> {
        let rec = tape
            .record
            .as_ref()
            .ok_or_else(|| Error::State("backward called before a recorded forward pass".into()))?;
        let cfg = &self.config;
        if d_embeddings.shape() != (rec.batch, cfg.embed_dim) {
            return Err(Error::Shape(format!(
                "loss gradient must be {}x{}, got {:?}",
                rec.batch,
                cfg.embed_dim,
                d_embeddings.shape()
            )));
        }
        let mut grads = self.params.zeros_like();
        let dflat = self
            .params
            .embedding
            .backward(d_embeddings, &rec.embedding, &mut grads.embedding);
        let mut du = dflat.reshape(rec.batch * cfg.steps(), cfg.model_width())?;
        for (i, layer) in self.params.attention.iter().enumerate().rev() {
            du = layer.backward(&du, &rec.attention[i], cfg.steps(), &mut grads.attention[i]);
        }
        let branch_width = 2 * cfg.lstm_hidden;
        let dx = du.slice_cols(0, branch_width);
        let dy = du.slice_cols(branch_width, branch_width);
        branch_backward(&self.params.rf, cfg, &dx, &rec.rf, &mut grads.rf);
        branch_backward(&self.params.mems, cfg, &dy, &rec.mems, &mut grads.mems);
        Ok(grads)
    }

    /// Folds the batch statistics recorded on a train-mode tape into the
    /// running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) -> Result<()> {
        let rec = tape
            .record
            .as_ref()
            .ok_or_else(|| Error::State("no recorded forward pass".into()))?;
        let momentum = self.config.bn_momentum;
        update_branch_stats(&mut self.stats.rf, &rec.rf, momentum);
        update_branch_stats(&mut self.stats.mems, &rec.mems, momentum);
        Ok(())
    }
}

/// Features of one branch for a single `M x F` window: `(M/2) x 2h`.
pub fn branch_forward(
    params: &BranchParams,
    stats: &BranchStats,
    cfg: &FusionConfig,
    seq: &Matrix,
    mode: Mode,
) -> Result<Matrix> {
    let input = params.bn_in.channels();
    if seq.cols() != input {
        return Err(Error::Shape(format!(
            "branch expects {input} input features, got {}",
            seq.cols()
        )));
    }
    if seq.rows() != cfg.sample_len || seq.rows() % 2 != 0 {
        return Err(Error::Shape(format!(
            "branch expects {} rows, got {}",
            cfg.sample_len,
            seq.rows()
        )));
    }
    Ok(branch_forward_stacked(params, stats, cfg, seq, mode).0)
}

/// Per-timestep feature concatenation `[x | y]`.
pub fn concat_features(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    x.hconcat(y)
}

/// Self-attention over the rows of `u` (one sequence), `heads` heads.
pub fn multi_head_attention(layer: &AttentionLayer, u: &Matrix, heads: usize) -> Result<Matrix> {
    Ok(layer.forward(u, u.rows(), heads)?.0)
}

/// Affine map followed by L2 normalization.
pub fn embed(params: &Embedding, flat: &[f64]) -> Result<Vec<f64>> {
    let input = Matrix::from_vec(1, flat.len(), flat.to_vec())?;
    Ok(params.forward(&input)?.0.into_data())
}

#[cfg(test)]
mod tests;
