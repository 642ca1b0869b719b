//! Closed- and open-world metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{FusionModel, Mode};
use crate::math;
use crate::ocsvm::UavRegistry;
use crate::signal::AlignedSample;

use super::split::ClaimedSample;

/// Anything that scores a sample against every registered id.
pub trait SampleScorer {
    /// Registered ids in ascending order.
    fn ids(&self) -> Vec<String>;

    /// One score per id, in [`SampleScorer::ids`] order. A claim is accepted iff its score is `>= 0`.
    fn scores(&self, sample: &AlignedSample) -> Result<Vec<f64>>;
}

/// A trained fusion model paired with its registry.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub model: FusionModel,
    pub registry: UavRegistry,
}

impl SampleScorer for Pipeline {
    fn ids(&self) -> Vec<String> {
        self.registry.ids().map(String::from).collect()
    }

    fn scores(&self, sample: &AlignedSample) -> Result<Vec<f64>> {
        let g = self.model.forward_full(sample, Mode::Eval)?;
        Ok(self.registry.scores(&g).into_iter().map(|(_, s)| s).collect())
    }
}

/// Index of the largest score; ties go to the earliest (smallest) id.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// One row of the open-world round table.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundRow {
    pub round: usize,
    pub impostors: Vec<String>,
    pub accuracy: f64,
    pub tnr: Option<f64>,
    pub recall: f64,
    pub precision: Option<f64>,
}

/// Evaluation metrics.
///
/// Closed world: `confusion[true][predicted]` over `labels` from
/// identification; recall and precision are macro averages over classes
/// where they are defined; TNR comes from replaying each test sample once
/// under a wrong claimed id.
///
/// Open world: `labels` are `legitimate` and `impostor` and
/// `confusion[actual][decided]`. When `per_round` is present the headline
/// metrics are arithmetic means over rounds and `confusion` is pooled.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub accuracy: f64,
    /// Absent when there were no negative trials.
    pub tnr: Option<f64>,
    pub recall: f64,
    /// Absent when nothing was predicted positive.
    pub precision: Option<f64>,
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    /// Replayed wrong-id trials and how many were rejected (closed world).
    pub negatives: u64,
    pub negatives_rejected: u64,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub per_round: Option<Vec<RoundRow>>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy, macro recall and macro precision of a square confusion matrix.
pub fn multiclass_metrics(confusion: &[Vec<u64>]) -> (f64, f64, Option<f64>) {
    let n = confusion.len();
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..n).map(|i| confusion[i][i]).sum();
    let recalls: Vec<f64> = (0..n)
        .filter_map(|i| ratio(confusion[i][i], confusion[i].iter().sum()))
        .collect();
    let precisions: Vec<f64> = (0..n)
        .filter_map(|j| ratio(confusion[j][j], (0..n).map(|i| confusion[i][j]).sum()))
        .collect();
    let precision = (!precisions.is_empty()).then(|| math::mean(&precisions));
    (ratio(correct, total).unwrap_or(0.0), math::mean(&recalls), precision)
}

/// Identification over `test`, plus one wrong-claim replay per sample.
pub fn evaluate_closed(scorer: &dyn SampleScorer, test: &[AlignedSample], seed: u64) -> Result<EvalReport> {
    let ids = scorer.ids();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if test.is_empty() {
        return Err(Error::Data("no test samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut confusion = vec![vec![0u64; ids.len()]; ids.len()];
    let (mut negatives, mut rejected) = (0u64, 0u64);
    for (n, s) in test.iter().enumerate() {
        let id = s
            .device_id
            .as_deref()
            .ok_or_else(|| Error::Data(format!("test sample {n} has no device id")))?;
        let truth = *index
            .get(id)
            .ok_or_else(|| Error::Data(format!("test label `{id}` is not registered")))?;
        let scores = scorer.scores(s)?;
        if scores.len() != ids.len() {
            return Err(Error::Shape(format!(
                "scorer returned {} scores for {} ids",
                scores.len(),
                ids.len()
            )));
        }
        let pred = argmax_first(&scores).expect("at least one id");
        confusion[truth][pred] += 1;
        let wrong: Vec<usize> = (0..ids.len()).filter(|&j| j != truth).collect();
        if let Some(&claim) = wrong.choose(&mut rng) {
            negatives += 1;
            if scores[claim] < 0.0 {
                rejected += 1;
            }
        }
    }
    let (accuracy, recall, precision) = multiclass_metrics(&confusion);
    Ok(EvalReport {
        accuracy,
        tnr: ratio(rejected, negatives),
        recall,
        precision,
        labels: ids,
        confusion,
        negatives,
        negatives_rejected: rejected,
        per_round: None,
    })
}

pub const LEGITIMATE: &str = "legitimate";
pub const IMPOSTOR: &str = "impostor";

/// Builds an open-world report from a 2×2 `[actual][decided]` count matrix,
/// row 0 legitimate, column 0 accepted.
pub fn binary_report(confusion: [[u64; 2]; 2]) -> EvalReport {
    let [[tp, fn_], [fp, tn]] = confusion;
    EvalReport {
        accuracy: ratio(tp + tn, tp + fn_ + fp + tn).unwrap_or(0.0),
        tnr: ratio(tn, tn + fp),
        recall: ratio(tp, tp + fn_).unwrap_or(0.0),
        precision: ratio(tp, tp + fp),
        labels: vec![LEGITIMATE.into(), IMPOSTOR.into()],
        confusion: confusion.iter().map(|r| r.to_vec()).collect(),
        negatives: fp + tn,
        negatives_rejected: tn,
        per_round: None,
    }
}

/// Genuine samples claim their own id; impostors claim their assigned id.
pub fn evaluate_open_round(
    scorer: &dyn SampleScorer,
    genuine: &[AlignedSample],
    impostors: &[ClaimedSample],
) -> Result<EvalReport> {
    let ids = scorer.ids();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("id `{id}` is not registered")))
    };
    let mut confusion = [[0u64; 2]; 2];
    for (n, s) in genuine.iter().enumerate() {
        let id = s
            .device_id
            .as_deref()
            .ok_or_else(|| Error::Data(format!("test sample {n} has no device id")))?;
        let accepted = scorer.scores(s)?[lookup(id)?] >= 0.0;
        confusion[0][usize::from(!accepted)] += 1;
    }
    for c in impostors {
        if c.sample.device_id.as_deref().is_some_and(|d| index.contains_key(d)) {
            return Err(Error::Data(format!(
                "impostor sample belongs to registered id `{}`",
                c.claimed_id
            )));
        }
        let accepted = scorer.scores(&c.sample)?[lookup(&c.claimed_id)?] >= 0.0;
        confusion[1][usize::from(!accepted)] += 1;
    }
    Ok(binary_report(confusion))
}

/// Impostor ids of one open-world round.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct RoundSpec {
    pub impostors: Vec<String>,
}

/// Checks that every round names distinct, known impostors and leaves someone registered.
pub fn validate_rounds(rounds: &[RoundSpec], devices: &[String]) -> Result<()> {
    if rounds.is_empty() {
        return Err(Error::Config("at least one round is required".into()));
    }
    let known: BTreeSet<&str> = devices.iter().map(String::as_str).collect();
    for (r, round) in rounds.iter().enumerate() {
        let set: BTreeSet<&str> = round.impostors.iter().map(String::as_str).collect();
        if set.len() != round.impostors.len() {
            return Err(Error::Config(format!("round {} repeats an impostor", r + 1)));
        }
        if let Some(id) = set.iter().find(|id| !known.contains(**id)) {
            return Err(Error::Config(format!("round {} names unknown device `{id}`", r + 1)));
        }
        if set.len() >= known.len() {
            return Err(Error::Config(format!("round {} leaves no registered device", r + 1)));
        }
    }
    Ok(())
}

/// `rounds` disjoint pairs of impostors drawn by cycling through a shuffled device list.
pub fn default_rounds(devices: &[String], rounds: usize, per_round: usize, seed: u64) -> Result<Vec<RoundSpec>> {
    use rand::seq::SliceRandom;
    if per_round == 0 || per_round >= devices.len() {
        return Err(Error::Config(format!(
            "{per_round} impostors per round with {} devices",
            devices.len()
        )));
    }
    let mut order: Vec<String> = devices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut cursor = 0;
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut impostors: Vec<String> = (0..per_round)
            .map(|k| order[(cursor + k) % order.len()].clone())
            .collect();
        cursor += per_round;
        impostors.sort();
        out.push(RoundSpec { impostors });
    }
    Ok(out)
}

/// Per-round rows plus round-averaged headline metrics.
pub fn summarize_open(rounds: &[(RoundSpec, EvalReport)]) -> Result<EvalReport> {
    if rounds.is_empty() {
        return Err(Error::Config("no rounds to summarize".into()));
    }
    let mut pooled = [[0u64; 2]; 2];
    let mut rows = Vec::with_capacity(rounds.len());
    for (r, (spec, rep)) in rounds.iter().enumerate() {
        if rep.confusion.len() != 2 || rep.confusion.iter().any(|row| row.len() != 2) {
            return Err(Error::Shape("open-world round report must be 2x2".into()));
        }
        for (i, row) in rep.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                pooled[i][j] += v;
            }
        }
        rows.push(RoundRow {
            round: r + 1,
            impostors: spec.impostors.clone(),
            accuracy: rep.accuracy,
            tnr: rep.tnr,
            recall: rep.recall,
            precision: rep.precision,
        });
    }
    let defined_mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| math::mean(&xs));
    let mut out = binary_report(pooled);
    out.accuracy = math::mean(&rows.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    out.recall = math::mean(&rows.iter().map(|r| r.recall).collect::<Vec<_>>());
    out.tnr = defined_mean(rows.iter().filter_map(|r| r.tnr).collect());
    out.precision = defined_mean(rows.iter().filter_map(|r| r.precision).collect());
    out.per_round = Some(rows);
    Ok(out)
}

/// Nearest-centroid cosine classifier over standardized raw sample features.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestCentroid {
    ids: Vec<String>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    centroids: Vec<Vec<f64>>,
}

fn raw_features(s: &AlignedSample) -> Vec<f64> {
    let mut v = s.rf.data().to_vec();
    v.extend_from_slice(s.mems.data());
    v
}

impl NearestCentroid {
    pub fn fit(train: &[AlignedSample]) -> Result<Self> {
        let groups = super::split::group_by_device(train)?;
        let Some(first) = train.first() else {
            return Err(Error::Data("no training samples".into()));
        };
        let dim = raw_features(first).len();
        let feats: Vec<Vec<f64>> = train.iter().map(raw_features).collect();
        if feats.iter().any(|f| f.len() != dim) {
            return Err(Error::Shape("training samples differ in shape".into()));
        }
        let n = feats.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in &feats {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in &feats {
            for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let inv_std = var
            .iter()
            .map(|v| if *v > 1e-24 { 1.0 / math::sqrt(*v) } else { 0.0 })
            .collect();
        let mut model = NearestCentroid {
            ids: Vec::new(),
            mean,
            inv_std,
            centroids: Vec::new(),
        };
        for (id, members) in groups {
            let mut c = vec![0.0; dim];
            for s in &members {
                for (acc, x) in c.iter_mut().zip(model.standardize(s)) {
                    *acc += x / members.len() as f64;
                }
            }
            model.ids.push(id);
            model.centroids.push(c);
        }
        Ok(model)
    }

    fn standardize(&self, s: &AlignedSample) -> Vec<f64> {
        raw_features(s)
            .iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), k)| (x - m) * k)
            .collect()
    }

    pub fn predict(&self, s: &AlignedSample) -> Result<&str> {
        let scores = self.cosines(s)?;
        Ok(&self.ids[argmax_first(&scores).expect("at least one centroid")])
    }

    fn cosines(&self, s: &AlignedSample) -> Result<Vec<f64>> {
        let x = self.standardize(s);
        if x.len() != self.mean.len() {
            return Err(Error::Shape("sample shape differs from training data".into()));
        }
        let nx = math::norm(&x);
        Ok(self
            .centroids
            .iter()
            .map(|c| {
                let d = nx * math::norm(c);
                if d > 0.0 {
                    math::dot(&x, c) / d
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn accuracy(&self, test: &[AlignedSample]) -> Result<f64> {
        if test.is_empty() {
            return Err(Error::Data("no test samples".into()));
        }
        let mut correct = 0usize;
        for s in test {
            if Some(self.predict(s)?) == s.device_id.as_deref() {
                correct += 1;
            }
        }
        Ok(correct as f64 / test.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use alloc::string::ToString;

    /// Reads the device id back out of `rf[0][0]`.
    struct Stub {
        ids: Vec<String>,
        /// Score given to the true id and to every other id.
        own: f64,
        other: f64,
    }

    impl SampleScorer for Stub {
        fn ids(&self) -> Vec<String> {
            self.ids.clone()
        }

        fn scores(&self, s: &AlignedSample) -> Result<Vec<f64>> {
            let truth = s.rf.get(0, 0) as usize;
            Ok((0..self.ids.len())
                .map(|i| if i == truth { self.own } else { self.other })
                .collect())
        }
    }

    fn sample(dev: usize) -> AlignedSample {
        AlignedSample::new(
            Matrix::from_vec(2, 2, vec![dev as f64; 4]).unwrap(),
            Matrix::zeros(2, 8),
            Some(format!("d{dev}")),
        )
        .unwrap()
    }

    fn stub(own: f64, other: f64) -> Stub {
        Stub {
            ids: (0..3).map(|d| format!("d{d}")).collect(),
            own,
            other,
        }
    }

    fn test_set() -> Vec<AlignedSample> {
        (0..30).map(|i| sample(i % 3)).collect()
    }

    #[test]
    fn perfect_scorer() {
        let r = evaluate_closed(&stub(1.0, -1.0), &test_set(), 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.tnr, Some(1.0));
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.negatives, 30);
    }

    #[test]
    fn always_accept_scorer() {
        let r = evaluate_closed(&stub(1.0, 1.0), &test_set(), 0).unwrap();
        assert_eq!(r.tnr, Some(0.0));
        // all ties resolve to the first id
        assert_eq!(r.confusion, vec![vec![10, 0, 0], vec![10, 0, 0], vec![10, 0, 0]]);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
        // macro precision is defined for d0 only
        assert!((r.precision.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uncovered_label_is_a_data_error() {
        let mut s = stub(1.0, -1.0);
        s.ids.truncate(2);
        assert!(matches!(evaluate_closed(&s, &test_set(), 0), Err(Error::Data(_))));
    }

    #[test]
    fn metrics_match_confusion() {
        let c = vec![vec![5, 1, 0], vec![2, 7, 1], vec![0, 0, 4]];
        let (acc, rec, prec) = multiclass_metrics(&c);
        assert!((acc - 16.0 / 20.0).abs() < 1e-12);
        assert!((rec - (5.0 / 6.0 + 0.7 + 1.0) / 3.0).abs() < 1e-12);
        assert!((prec.unwrap() - (5.0 / 7.0 + 7.0 / 8.0 + 0.8) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn open_round_metrics() {
        let genuine: Vec<AlignedSample> = (0..6).map(|i| sample(i % 2)).collect();
        let mut imp = sample(2);
        imp.device_id = Some("outsider".into());
        let impostors: Vec<ClaimedSample> = (0..4)
            .map(|_| ClaimedSample {
                sample: imp.clone(),
                claimed_id: "d0".into(),
            })
            .collect();
        let scorer = Stub {
            ids: vec!["d0".into(), "d1".into()],
            own: 1.0,
            other: -1.0,
        };
        // the outsider reads as index 2, which is out of range, so every claim scores "other"
        let r = evaluate_open_round(&scorer, &genuine, &impostors).unwrap();
        assert_eq!(r.confusion, vec![vec![6, 0], vec![0, 4]]);
        assert_eq!(
            (r.accuracy, r.tnr, r.recall, r.precision),
            (1.0, Some(1.0), 1.0, Some(1.0))
        );

        let lax = Stub {
            ids: vec!["d0".into(), "d1".into()],
            own: 1.0,
            other: 1.0,
        };
        let r = evaluate_open_round(&lax, &genuine, &impostors).unwrap();
        assert_eq!(r.tnr, Some(0.0));
        assert!((r.accuracy - 0.6).abs() < 1e-12);
        assert!((r.precision.unwrap() - 0.6).abs() < 1e-12);

        let none = evaluate_open_round(&scorer, &genuine, &[]).unwrap();
        assert_eq!(none.tnr, None);
    }

    #[test]
    fn open_summary_averages_rounds() {
        let a = binary_report([[9, 1], [0, 10]]);
        let b = binary_report([[8, 2], [2, 8]]);
        let spec = |x: &str| RoundSpec {
            impostors: vec![x.to_string()],
        };
        let s = summarize_open(&[(spec("x"), a), (spec("y"), b)]).unwrap();
        assert!((s.accuracy - (0.95 + 0.8) / 2.0).abs() < 1e-12);
        assert!((s.tnr.unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(s.confusion, vec![vec![17, 3], vec![2, 18]]);
        assert_eq!(s.per_round.as_ref().unwrap().len(), 2);
        assert!(matches!(summarize_open(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn round_validation() {
        let devs: Vec<String> = (0..4).map(|d| format!("d{d}")).collect();
        let rounds = default_rounds(&devs, 6, 2, 1).unwrap();
        assert_eq!(rounds.len(), 6);
        validate_rounds(&rounds, &devs).unwrap();
        let bad = [RoundSpec {
            impostors: vec!["zz".into()],
        }];
        assert!(matches!(validate_rounds(&bad, &devs), Err(Error::Config(_))));
        let dup = [RoundSpec {
            impostors: vec!["d1".into(), "d1".into()],
        }];
        assert!(matches!(validate_rounds(&dup, &devs), Err(Error::Config(_))));
        assert!(matches!(
            validate_rounds(
                &[RoundSpec {
                    impostors: devs.clone()
                }],
                &devs
            ),
            Err(Error::Config(_))
        ));
        assert!(matches!(validate_rounds(&[], &devs), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_centroid_separates_offsets() {
        let mk = |dev: usize, jitter: f64| {
            let mut rf = vec![0.0; 4];
            rf[dev] = 1.0 + jitter;
            AlignedSample::new(
                Matrix::from_vec(2, 2, rf).unwrap(),
                Matrix::zeros(2, 8),
                Some(format!("d{dev}")),
            )
            .unwrap()
        };
        let train: Vec<_> = (0..12).map(|i| mk(i % 3, 0.01 * i as f64)).collect();
        let nc = NearestCentroid::fit(&train).unwrap();
        assert_eq!(nc.predict(&mk(2, 0.3)).unwrap(), "d2");
        assert_eq!(nc.accuracy(&train).unwrap(), 1.0);
    }
}
