//! Per-device one-class SVMs with a Gaussian kernel and the registry built on them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::math;
use crate::signal::AlignedSample;

pub const DEFAULT_GAMMA: f64 = 1.0 / 256.0;
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_MIN_SAMPLES: usize = 50;
pub const MAX_ITERATIONS: usize = 100_000;
pub const KKT_TOLERANCE: f64 = 1e-5;

/// Curvature floor for working pairs with a degenerate kernel sub-matrix.
const MIN_CURVATURE: f64 = 1e-12;

pub fn gaussian_kernel(a: &[f64], b: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(kernel(a, b, gamma))
}

#[inline]
fn kernel(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    math::exp(-gamma * math::squared_distance(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OcSvmConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Fewest embeddings accepted when registering an id.
    pub min_samples: usize,
}

impl Default for OcSvmConfig {
    fn default() -> Self {
        OcSvmConfig {
            gamma: DEFAULT_GAMMA,
            tau: DEFAULT_TAU,
            min_samples: DEFAULT_MIN_SAMPLES,
        }
    }
}

impl OcSvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.min_samples < 2 {
            return Err(Error::Config("min_samples must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct OcSvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    pub dual_coeffs: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Number of embeddings the model was fitted on.
    pub num_training: usize,
}

/// Solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitStats {
    pub iterations: usize,
    /// Final maximal KKT violation.
    pub violation: f64,
    /// Dual objective `½ aᵀKa`.
    pub objective: f64,
}

/// Solution over all training points, including zero duals.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub stats: FitStats,
}

impl OcSvmModel {
    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.tau * self.num_training as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.support_vectors.len() != self.dual_coeffs.len() || self.support_vectors.is_empty() {
            return Err(Error::InvalidInput(
                "support vectors and dual coefficients disagree".into(),
            ));
        }
        let dim = self.support_vectors[0].len();
        if self
            .support_vectors
            .iter()
            .any(|s| s.len() != dim || s.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::InvalidInput(
                "support vectors must share one finite dimension".into(),
            ));
        }
        if !(self.gamma > 0.0) || !(self.tau > 0.0 && self.tau <= 1.0) || !self.rho.is_finite() {
            return Err(Error::InvalidInput("gamma, tau or rho out of range".into()));
        }
        let c = self.upper_bound() * (1.0 + 1e-9);
        if self.dual_coeffs.iter().any(|&a| !(a > 0.0 && a <= c)) {
            return Err(Error::InvalidInput("dual coefficient outside (0, 1/(tau B)]".into()));
        }
        let sum: f64 = self.dual_coeffs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("dual coefficients sum to {sum}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.support_vectors[0].len()
    }

    /// Signed decision value `Σ aᵢ K(sᵢ, g) − ρ`.
    pub fn score(&self, g: &[f64]) -> f64 {
        let s: f64 = self
            .support_vectors
            .iter()
            .zip(&self.dual_coeffs)
            .map(|(sv, a)| a * kernel(sv, g, self.gamma))
            .sum();
        s - self.rho
    }

    pub fn decide(&self, g: &[f64]) -> Decision {
        if self.score(g) >= 0.0 {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }
}

pub fn score(model: &OcSvmModel, g: &[f64]) -> f64 {
    model.score(g)
}

pub fn decide(model: &OcSvmModel, g: &[f64]) -> Decision {
    model.decide(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn is_accept(self) -> bool {
        self == Decision::Accept
    }
}

fn check_embeddings(embeddings: &[Vec<f64>]) -> Result<usize> {
    if embeddings.len() < 2 {
        return Err(Error::Data(format!(
            "one-class fit needs at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    if dim == 0 {
        return Err(Error::InvalidInput("empty embedding".into()));
    }
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::Shape(format!(
                "embedding {i} has length {}, expected {dim}",
                e.len()
            )));
        }
        if e.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("embedding {i} is not finite")));
        }
    }
    Ok(dim)
}

/// Solves `min ½ aᵀKa` subject to `0 ≤ aᵢ ≤ 1/(τB)` and `Σaᵢ = 1` by
/// two-coordinate descent with second-order working-pair selection.
pub fn solve_dual(embeddings: &[Vec<f64>], tau: f64, gamma: f64) -> Result<DualSolution> {
    let b = embeddings.len();
    check_embeddings(embeddings)?;
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    let c = 1.0 / (tau * b as f64);

    let mut k = vec![0.0; b * b];
    for i in 0..b {
        k[i * b + i] = 1.0;
        for j in 0..i {
            let v = kernel(&embeddings[i], &embeddings[j], gamma);
            k[i * b + j] = v;
            k[j * b + i] = v;
        }
    }

    // fill the first floor(τB) duals to the bound, the remainder goes to the next one
    let mut alpha = vec![0.0; b];
    let full = math::floor(tau * b as f64) as usize;
    let mut left = 1.0;
    for a in alpha.iter_mut().take(full.min(b)) {
        *a = c.min(left);
        left -= *a;
    }
    if full < b && left > 0.0 {
        alpha[full] = left;
    }

    let mut grad = vec![0.0; b];
    for i in 0..b {
        grad[i] = (0..b).map(|j| k[i * b + j] * alpha[j]).sum();
    }

    let mut iterations = 0;
    let violation = loop {
        // i raises its dual (smallest gradient among those below the bound)
        let mut i_sel = usize::MAX;
        let mut g_min = f64::INFINITY;
        for t in 0..b {
            if alpha[t] < c && grad[t] < g_min {
                g_min = grad[t];
                i_sel = t;
            }
        }
        let mut g_max = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut best_gain = f64::INFINITY;
        for t in 0..b {
            if alpha[t] > 0.0 {
                g_max = g_max.max(grad[t]);
                let diff = grad[t] - g_min;
                if i_sel != usize::MAX && diff > 0.0 {
                    let curv = (k[i_sel * b + i_sel] + k[t * b + t] - 2.0 * k[i_sel * b + t]).max(MIN_CURVATURE);
                    let gain = -(diff * diff) / curv;
                    if gain < best_gain {
                        best_gain = gain;
                        j_sel = t;
                    }
                }
            }
        }
        let violation = g_max - g_min;
        if i_sel == usize::MAX || j_sel == usize::MAX || violation < KKT_TOLERANCE {
            break violation.max(0.0);
        }
        if iterations >= MAX_ITERATIONS {
            return Err(Error::Convergence { iterations, violation });
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let curv = (k[i * b + i] + k[j * b + j] - 2.0 * k[i * b + j]).max(MIN_CURVATURE);
        let step = ((grad[j] - grad[i]) / curv).min(c - alpha[i]).min(alpha[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        // snap to the box so bound membership is exact
        if c - alpha[i] <= 1e-15 * c {
            alpha[i] = c;
        }
        if alpha[j] <= 1e-15 * c {
            alpha[j] = 0.0;
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..b {
            grad[t] += k[t * b + i] * di + k[t * b + j] * dj;
        }
    };

    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    for t in 0..b {
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += grad[t];
            free_count += 1;
        }
    }
    let rho = if free_count > 0 {
        free_sum / free_count as f64
    } else {
        let mut top = 0;
        for t in 1..b {
            if alpha[t] > alpha[top] {
                top = t;
            }
        }
        grad[top]
    };
    let objective = 0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * g).sum::<f64>();
    Ok(DualSolution {
        alpha,
        rho,
        stats: FitStats {
            iterations,
            violation,
            objective,
        },
    })
}

pub fn fit_ocsvm(embeddings: &[Vec<f64>], tau: f64, gamma: f64) -> Result<OcSvmModel> {
    Ok(fit_ocsvm_with_stats(embeddings, tau, gamma)?.0)
}

pub fn fit_ocsvm_with_stats(embeddings: &[Vec<f64>], tau: f64, gamma: f64) -> Result<(OcSvmModel, FitStats)> {
    let sol = solve_dual(embeddings, tau, gamma)?;
    let mut support_vectors = Vec::new();
    let mut dual_coeffs = Vec::new();
    for (e, &a) in embeddings.iter().zip(&sol.alpha) {
        if a > 0.0 {
            support_vectors.push(e.clone());
            dual_coeffs.push(a);
        }
    }
    let model = OcSvmModel {
        support_vectors,
        dual_coeffs,
        rho: sol.rho,
        gamma,
        tau,
        num_training: embeddings.len(),
    };
    Ok((model, sol.stats))
}

/// Per-id one-class models sharing one fusion-model checkpoint.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct UavRegistry {
    /// Identifies the fusion-model checkpoint the embeddings came from.
    pub model_version: String,
    pub config: OcSvmConfig,
    pub models: BTreeMap<String, OcSvmModel>,
}

impl UavRegistry {
    pub fn new(model_version: impl Into<String>, config: OcSvmConfig) -> Result<Self> {
        config.validate()?;
        Ok(UavRegistry {
            model_version: model_version.into(),
            config,
            models: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.models.contains_key(id)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (id, m) in &self.models {
            m.validate()
                .map_err(|e| Error::InvalidInput(format!("model `{id}`: {e}")))?;
            if m.num_training < self.config.min_samples {
                return Err(Error::InvalidInput(format!(
                    "model `{id}` fitted on {} embeddings, fewer than {}",
                    m.num_training, self.config.min_samples
                )));
            }
        }
        Ok(())
    }

    /// Fits and stores a model for `id` from its embeddings.
    pub fn register(&mut self, id: &str, embeddings: &[Vec<f64>], overwrite: bool) -> Result<FitStats> {
        if id.is_empty() {
            return Err(Error::InvalidInput("empty device id".into()));
        }
        if !overwrite && self.contains(id) {
            return Err(Error::Conflict(String::from(id)));
        }
        if embeddings.len() < self.config.min_samples {
            return Err(Error::Data(format!(
                "id `{id}` has {} embeddings, registration needs {}",
                embeddings.len(),
                self.config.min_samples
            )));
        }
        let (model, stats) = fit_ocsvm_with_stats(embeddings, self.config.tau, self.config.gamma)?;
        self.models.insert(String::from(id), model);
        Ok(stats)
    }

    fn model(&self, id: &str) -> Result<&OcSvmModel> {
        self.models.get(id).ok_or_else(|| Error::UnknownId(String::from(id)))
    }

    pub fn score_embedding(&self, claimed_id: &str, g: &[f64]) -> Result<f64> {
        Ok(self.model(claimed_id)?.score(g))
    }

    pub fn authenticate_embedding(&self, claimed_id: &str, g: &[f64]) -> Result<Decision> {
        Ok(self.model(claimed_id)?.decide(g))
    }

    /// All per-id scores in id order.
    pub fn scores(&self, g: &[f64]) -> Vec<(&str, f64)> {
        self.models.iter().map(|(id, m)| (id.as_str(), m.score(g))).collect()
    }

    /// Highest-scoring id; ties go to the lexicographically smallest id.
    pub fn identify_embedding(&self, g: &[f64]) -> Result<(&str, f64)> {
        let mut best: Option<(&str, f64)> = None;
        for (id, s) in self.scores(g) {
            // ids arrive in ascending order, so only a strictly larger score wins
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((id, s));
            }
        }
        best.ok_or_else(|| Error::State("registry is empty".into()))
    }

    pub fn authenticate(&self, claimed_id: &str, sample: &AlignedSample, model: &FusionModel) -> Result<Decision> {
        let m = self.model(claimed_id)?;
        Ok(m.decide(&model.forward_full(sample, crate::fusion::Mode::Eval)?))
    }

    pub fn identify(&self, sample: &AlignedSample, model: &FusionModel) -> Result<String> {
        if self.is_empty() {
            return Err(Error::State("registry is empty".into()));
        }
        let g = model.forward_full(sample, crate::fusion::Mode::Eval)?;
        Ok(String::from(self.identify_embedding(&g)?.0))
    }
}

pub fn register_uav(
    registry: &mut UavRegistry,
    id: &str,
    embeddings: &[Vec<f64>],
    overwrite: bool,
) -> Result<FitStats> {
    registry.register(id, embeddings, overwrite)
}

pub fn authenticate(
    registry: &UavRegistry,
    claimed_id: &str,
    sample: &AlignedSample,
    model: &FusionModel,
) -> Result<Decision> {
    registry.authenticate(claimed_id, sample, model)
}

pub fn identify(registry: &UavRegistry, sample: &AlignedSample, model: &FusionModel) -> Result<String> {
    registry.identify(sample, model)
}
