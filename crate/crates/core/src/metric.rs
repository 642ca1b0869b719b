//! Multi-similarity metric learning for the fusion network.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{FusionModel, FusionParams, Mode, Tape};
use crate::math;
use crate::matrix::Matrix;
use crate::signal::AlignedSample;

/// Scales and margin of the multi-similarity loss.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        MsLossConfig {
            alpha: 1.0,
            beta: 10.0,
            margin: 0.5,
        }
    }
}

impl MsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.margin > -1.0 && self.margin < 1.0) {
            return Err(Error::Config(format!(
                "margin must lie in (-1, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Embeddings with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub embeddings: Matrix,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn new(embeddings: Matrix, labels: Vec<u32>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        for (i, r) in embeddings.iter_rows().enumerate() {
            if (math::norm(r) - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("embedding {i} is not unit norm")));
            }
        }
        Ok(Batch { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (math::norm(a), math::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero vector".into()));
    }
    Ok((math::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Positive and negative index sets of one anchor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnchorPairs {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Every same-label sample is a positive, every other-label sample a negative.
pub fn mine_pairs(labels: &[u32]) -> Vec<AnchorPairs> {
    labels
        .iter()
        .enumerate()
        .map(|(i, li)| {
            let mut p = AnchorPairs::default();
            for (j, lj) in labels.iter().enumerate() {
                if j == i {
                    continue;
                }
                if lj == li {
                    p.positives.push(j);
                } else {
                    p.negatives.push(j);
                }
            }
            p
        })
        .collect()
}

/// Multi-similarity loss and its gradient with respect to the embeddings.
pub fn ms_loss_with_grad(batch: &Batch, cfg: &MsLossConfig) -> Result<(f64, Matrix)> {
    let a = batch.len();
    if a < 2 {
        return Err(Error::InvalidInput(format!(
            "multi-similarity loss needs at least 2 samples, got {a}"
        )));
    }
    let g = &batch.embeddings;
    let sim = g.matmul_nt(g);
    let pairs = mine_pairs(&batch.labels);
    let inv_a = 1.0 / a as f64;
    // dsim[i][j] = ∂loss/∂C_ij where C_ij is read from anchor i's terms
    let mut dsim = Matrix::zeros(a, a);
    let mut loss = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let pos: Vec<f64> = p
            .positives
            .iter()
            .map(|&j| -cfg.alpha * (sim.get(i, j) - cfg.margin))
            .collect();
        let neg: Vec<f64> = p
            .negatives
            .iter()
            .map(|&r| cfg.beta * (sim.get(i, r) - cfg.margin))
            .collect();
        let lp = math::log1p_sum_exp(&pos);
        let ln = math::log1p_sum_exp(&neg);
        loss += lp / cfg.alpha + ln / cfg.beta;
        // d/dx log(1 + Σ e^x) = e^x / (1 + Σ e^x) = exp(x - lse)
        for (&j, &x) in p.positives.iter().zip(&pos) {
            dsim.set(i, j, -math::exp(x - lp) * inv_a);
        }
        for (&r, &x) in p.negatives.iter().zip(&neg) {
            dsim.set(i, r, math::exp(x - ln) * inv_a);
        }
    }
    let sym = {
        let mut s = dsim.transpose();
        s.add_assign(&dsim);
        s
    };
    Ok((loss * inv_a, sym.matmul(g)))
}

pub fn ms_loss(batch: &Batch, cfg: &MsLossConfig) -> Result<f64> {
    Ok(ms_loss_with_grad(batch, cfg)?.0)
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 30,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size < 4 {
            return Err(Error::Config(
                "learning_rate must be positive and batch_size >= 4".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &FusionParams, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut FusionParams, grads: &FusionParams) {
        self.step += 1;
        let bc1 = 1.0 - math::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - math::pow(self.beta2, self.step as f64);
        let grads = grads.tensors();
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Wall-clock source for training history; `no_std` builds use [`NoClock`].
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// Reports zero elapsed time.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainHistory {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned snapshot; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Maps device ids to dense labels in sorted id order.
pub fn label_map(samples: &[AlignedSample]) -> Result<BTreeMap<String, u32>> {
    let mut ids: Vec<&str> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let id = s
            .device_id
            .as_deref()
            .ok_or_else(|| Error::Data(format!("sample {i} has no device id")))?;
        ids.push(id);
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (String::from(id), i as u32))
        .collect())
}

fn labels_of(samples: &[AlignedSample], map: &BTreeMap<String, u32>) -> Result<Vec<u32>> {
    samples
        .iter()
        .map(|s| {
            let id = s.device_id.as_deref().unwrap_or_default();
            map.get(id)
                .copied()
                .ok_or_else(|| Error::Data(format!("unknown device id `{id}`")))
        })
        .collect()
}

/// Class-balanced `P x Q` batches: `P` labels with `Q` samples each.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_label: Vec<Vec<usize>>,
    per_batch_labels: usize,
    per_label: usize,
}

impl BalancedSampler {
    pub fn new(labels: &[u32], batch_size: usize) -> Result<Self> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let by_label: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= 2).collect();
        if by_label.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 labels with 2 or more samples, found {}",
                by_label.len()
            )));
        }
        let per_batch_labels = by_label.len().min(batch_size / 2);
        let per_label = batch_size / per_batch_labels;
        if per_batch_labels < 2 || per_label < 2 {
            return Err(Error::Data(format!(
                "batch size {batch_size} cannot hold 2 labels x 2 samples"
            )));
        }
        Ok(BalancedSampler {
            by_label,
            per_batch_labels,
            per_label,
        })
    }

    pub fn batch_len(&self) -> usize {
        self.per_batch_labels * self.per_label
    }

    /// One epoch of batches covering roughly as many samples as the input.
    pub fn epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let total: usize = self.by_label.iter().map(Vec::len).sum();
        let n_batches = total.div_ceil(self.batch_len());
        let mut queues: Vec<Vec<usize>> = self.by_label.clone();
        for q in &mut queues {
            q.shuffle(rng);
        }
        let mut cursors = vec![0usize; queues.len()];
        let mut order: Vec<usize> = (0..queues.len()).collect();
        let mut batches = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            order.shuffle(rng);
            let mut batch = Vec::with_capacity(self.batch_len());
            for &l in order.iter().take(self.per_batch_labels) {
                let q = &queues[l];
                for _ in 0..self.per_label {
                    batch.push(q[cursors[l] % q.len()]);
                    cursors[l] += 1;
                }
            }
            batches.push(batch);
        }
        batches
    }
}

/// Eval-mode loss over a whole sample set.
pub fn evaluate_loss(model: &FusionModel, samples: &[AlignedSample], labels: &[u32], ms: &MsLossConfig) -> Result<f64> {
    let emb = model.embed_all(samples)?;
    let batch = Batch::new(Matrix::from_rows(&emb)?, labels.to_vec())?;
    ms_loss(&batch, ms)
}

/// Trains with Adam on class-balanced batches and returns the parameters
/// with the lowest validation loss (the initial parameters included).
pub fn train(
    model: FusionModel,
    train_set: &[AlignedSample],
    val_set: &[AlignedSample],
    cfg: &TrainConfig,
    ms: &MsLossConfig,
    clock: &dyn Clock,
) -> Result<(FusionModel, TrainHistory)> {
    train_with_progress(model, train_set, val_set, cfg, ms, clock, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    mut model: FusionModel,
    train_set: &[AlignedSample],
    val_set: &[AlignedSample],
    cfg: &TrainConfig,
    ms: &MsLossConfig,
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(FusionModel, TrainHistory)> {
    cfg.validate()?;
    ms.validate()?;
    let map = label_map(train_set)?;
    let train_labels = labels_of(train_set, &map)?;
    if val_set.len() < 2 {
        return Err(Error::Data(format!(
            "validation set needs at least 2 samples, got {}",
            val_set.len()
        )));
    }
    let val_labels = labels_of(val_set, &map)?;
    let sampler = BalancedSampler::new(&train_labels, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg);

    let initial = evaluate_loss(&model, val_set, &val_labels, ms)?;
    let mut history = TrainHistory {
        initial_val_loss: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: initial,
    };
    let mut best = model.clone();
    let mut tape = Tape::new();

    for epoch in 1..=cfg.epochs {
        let start = clock.now_ms();
        let mut loss_sum = 0.0;
        let batches = sampler.epoch(&mut rng);
        for idx in &batches {
            let refs: Vec<&AlignedSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let g = model.forward_batch(&refs, Mode::Train, Some(&mut tape))?;
            let batch = Batch {
                embeddings: g,
                labels: idx.iter().map(|&i| train_labels[i]).collect(),
            };
            let (loss, dg) = ms_loss_with_grad(&batch, ms)?;
            let grads = model.backward(&tape, &dg)?;
            adam.step(&mut model.params, &grads);
            model.update_running_stats(&tape)?;
            loss_sum += loss;
        }
        if !model.params.is_finite() {
            return Err(Error::State(format!("parameters diverged in epoch {epoch}")));
        }
        let val_loss = evaluate_loss(&model, val_set, &val_labels, ms)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_loss,
            wall_ms: clock.now_ms() - start,
        };
        on_epoch(&record);
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = model.clone();
        }
        history.epochs.push(record);
    }
    tape.clear();
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = math::norm(v);
        v.iter().map(|x| x / n).collect()
    }

    /// Two unit vectors with cosine `c`.
    fn pair_with_cosine(c: f64) -> Matrix {
        let s = math::sqrt(1.0 - c * c);
        Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![c, s, 0.0]]).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let g = unit(&[0.3, -0.4, 1.2]);
        assert!((cosine_similarity(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&g, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn pair_mining_examples() {
        let p = mine_pairs(&[1, 1, 2]);
        assert_eq!(p[0].positives, vec![1]);
        assert_eq!(p[0].negatives, vec![2]);
        assert!(mine_pairs(&[3, 3, 3])
            .iter()
            .all(|a| a.negatives.is_empty() && a.positives.len() == 2));
        assert!(mine_pairs(&[0, 1, 2])
            .iter()
            .all(|a| a.positives.is_empty() && a.negatives.len() == 2));
    }

    #[test]
    fn ms_loss_analytic_values() {
        let cfg = MsLossConfig {
            alpha: 1.0,
            beta: 10.0,
            margin: 0.5,
        };
        // one positive per anchor at C = μ: each anchor contributes log 2
        let same = Batch::new(pair_with_cosine(0.5), vec![7, 7]).unwrap();
        assert!((ms_loss(&same, &cfg).unwrap() - core::f64::consts::LN_2).abs() < 1e-6);

        // only negatives at C = μ: (1/β) log 2 per anchor, averaged
        let diff = Batch::new(pair_with_cosine(0.5), vec![1, 2]).unwrap();
        let loss = ms_loss(&diff, &cfg).unwrap();
        assert!((loss - 0.1 * core::f64::consts::LN_2).abs() < 1e-9);
        assert!((loss - 0.069315).abs() < 1e-6);
    }

    #[test]
    fn empty_positive_set_contributes_nothing() {
        let cfg = MsLossConfig::default();
        let diff = Batch::new(pair_with_cosine(0.2), vec![1, 2]).unwrap();
        let manual = math::log1p_sum_exp(&[cfg.beta * (0.2 - cfg.margin)]) / cfg.beta;
        assert!((ms_loss(&diff, &cfg).unwrap() - manual).abs() < 1e-15);
    }

    #[test]
    fn monotone_in_similarity() {
        let cfg = MsLossConfig::default();
        let mut prev_pos = f64::INFINITY;
        let mut prev_neg = f64::NEG_INFINITY;
        for c in [-0.8, -0.3, 0.0, 0.4, 0.9] {
            let pos = ms_loss(&Batch::new(pair_with_cosine(c), vec![0, 0]).unwrap(), &cfg).unwrap();
            let neg = ms_loss(&Batch::new(pair_with_cosine(c), vec![0, 1]).unwrap(), &cfg).unwrap();
            assert!(pos < prev_pos);
            assert!(neg > prev_neg);
            prev_pos = pos;
            prev_neg = neg;
        }
    }

    #[test]
    fn alpha_rescaling_identity() {
        // doubling α while halving every (C - μ) leaves the exponents alone,
        // so the positive term scales by exactly 1/2
        let mu = 0.5;
        let c = 0.9;
        let a = ms_loss(
            &Batch::new(pair_with_cosine(c), vec![0, 0]).unwrap(),
            &MsLossConfig {
                alpha: 1.0,
                beta: 10.0,
                margin: mu,
            },
        )
        .unwrap();
        let halved = mu + (c - mu) / 2.0;
        let b = ms_loss(
            &Batch::new(pair_with_cosine(halved), vec![0, 0]).unwrap(),
            &MsLossConfig {
                alpha: 2.0,
                beta: 10.0,
                margin: mu,
            },
        )
        .unwrap();
        assert!((b - a / 2.0).abs() < 1e-12);
    }

    fn random_batch(seed: u64, n: usize, dim: usize, labels: u32) -> Batch {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let lab = (0..n).map(|i| i as u32 % labels).collect();
        Batch::new(Matrix::from_rows(&rows).unwrap(), lab).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = MsLossConfig::default();
        let batch = random_batch(3, 6, 5, 3);
        let (_, grad) = ms_loss_with_grad(&batch, &cfg).unwrap();
        let eps = 1e-6;
        for i in 0..6 {
            for j in 0..5 {
                let mut up = batch.clone();
                up.embeddings.set(i, j, up.embeddings.get(i, j) + eps);
                let mut down = batch.clone();
                down.embeddings.set(i, j, down.embeddings.get(i, j) - eps);
                // the loss is evaluated on raw dot products, so no renormalization here
                let numeric =
                    (ms_loss_with_grad(&up, &cfg).unwrap().0 - ms_loss_with_grad(&down, &cfg).unwrap().0) / (2.0 * eps);
                assert!((numeric - grad.get(i, j)).abs() < 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..1000, shift in 1usize..7) {
            let cfg = MsLossConfig::default();
            let batch = random_batch(seed, 7, 4, 3);
            let perm: Vec<usize> = (0..7).map(|i| (i + shift) % 7).collect();
            let rows: Vec<&[f64]> = perm.iter().map(|&i| batch.embeddings.row(i)).collect();
            let permuted = Batch::new(
                Matrix::from_rows(&rows).unwrap(),
                perm.iter().map(|&i| batch.labels[i]).collect(),
            ).unwrap();
            let a = ms_loss(&batch, &cfg).unwrap();
            let b = ms_loss(&permuted, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn sampler_contract() {
        let labels: Vec<u32> = (0..40).map(|i| i % 4).collect();
        let sampler = BalancedSampler::new(&labels, 16).unwrap();
        assert_eq!(sampler.batch_len(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for batch in sampler.epoch(&mut rng) {
            let mut counts = BTreeMap::new();
            for i in batch {
                *counts.entry(labels[i]).or_insert(0) += 1;
            }
            assert!(counts.len() >= 2);
            assert!(counts.values().all(|&c| c >= 2));
        }
        assert!(matches!(BalancedSampler::new(&[0, 1, 2, 3], 16), Err(Error::Data(_))));
        assert!(matches!(BalancedSampler::new(&[0, 0, 0], 16), Err(Error::Data(_))));
    }
}
