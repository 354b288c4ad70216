//! Stratified train/test split, threshold calibration on training scores,
//! and binary classification metrics in exact rational arithmetic.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Labels = BTreeMap<String, u8>;
pub type Scores = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub train_frac: f64,
}

/// Splits each class separately after a seeded shuffle.
///
/// The test size is `ceil((1 - train_frac) * n)` and the training size is
/// apportioned across classes by largest remainder of
/// `n_train * class_count / n`. For 117 patients with 39 positives at 0.7
/// this gives 81/36 with 27/12 positives.
pub fn stratified_split(labels: &Labels, train_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::config(format!("train_frac {train_frac} must be in (0, 1)")));
    }
    let mut classes: [Vec<&String>; 2] = [Vec::new(), Vec::new()];
    for (id, &label) in labels {
        if label > 1 {
            return Err(Error::Data(format!("label {label} for {id} is not binary")));
        }
        classes[label as usize].push(id);
    }
    if classes.iter().any(Vec::is_empty) {
        return Err(Error::config("stratified split needs both classes present"));
    }
    let n = labels.len() as u64;
    let n_test = (((1.0 - train_frac) * n as f64) - 1e-9).ceil().max(0.0) as u64;
    let n_train = n - n_test.min(n);

    let counts = [classes[0].len() as u64, classes[1].len() as u64];
    let mut alloc = [0u64; 2];
    let mut rems = [(0u64, 0usize); 2];
    for c in 0..2 {
        let scaled = n_train * counts[c];
        alloc[c] = scaled / n;
        rems[c] = (scaled % n, c);
    }
    let mut leftover = n_train - alloc[0] - alloc[1];
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in &rems {
        if leftover == 0 {
            break;
        }
        alloc[c] += 1;
        leftover -= 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (c, members) in classes.iter_mut().enumerate() {
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i as u64) as usize;
            members.swap(i, j);
        }
        let k = alloc[c] as usize;
        train_ids.extend(members[..k].iter().map(|s| s.to_string()));
        test_ids.extend(members[k..].iter().map(|s| s.to_string()));
    }
    train_ids.sort();
    test_ids.sort();
    Ok(Split {
        train_ids,
        test_ids,
        seed,
        train_frac,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Tallies `predictions` against `labels` over `ids`.
    pub fn tally(predictions: &BTreeMap<String, u8>, labels: &Labels, ids: &[String]) -> Result<Self> {
        let mut cm = ConfusionMatrix::default();
        for id in ids {
            let p = *predictions
                .get(id)
                .ok_or_else(|| Error::Data(format!("no prediction for {id}")))?;
            let y = *labels.get(id).ok_or_else(|| Error::Data(format!("no label for {id}")))?;
            match (p, y) {
                (1, 1) => cm.tp += 1,
                (1, _) => cm.fp += 1,
                (_, 1) => cm.fn_ += 1,
                _ => cm.tn += 1,
            }
        }
        Ok(cm)
    }

    fn ratio(num: u64, den: u64) -> Ratio<u64> {
        if den == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(num, den)
        }
    }

    pub fn precision(&self) -> Ratio<u64> {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Ratio<u64> {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Ratio<u64> {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> Ratio<u64> {
        Self::ratio(self.tp + self.tn, self.total())
    }

    /// Harmonic mean of precision and recall, `2tp / (2tp + fp + fn)`.
    pub fn f1(&self) -> Ratio<u64> {
        if self.tp == 0 {
            return Ratio::from_integer(0);
        }
        Ratio::new(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Exact metric values; [`Metrics::rounded`] renders them for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Metrics {
    pub accuracy: Ratio<u64>,
    pub precision: Ratio<u64>,
    pub recall: Ratio<u64>,
    pub f1: Ratio<u64>,
    pub auc: Option<Ratio<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundedMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

impl Metrics {
    pub fn with_auc(mut self, auc: Ratio<u64>) -> Self {
        self.auc = Some(auc);
        self
    }

    pub fn rounded(&self, decimals: u32) -> RoundedMetrics {
        RoundedMetrics {
            accuracy: round_half_up(self.accuracy, decimals),
            precision: round_half_up(self.precision, decimals),
            recall: round_half_up(self.recall, decimals),
            f1: round_half_up(self.f1, decimals),
            auc: self.auc.map(|a| round_half_up(a, decimals)),
        }
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Metrics {
    Metrics {
        accuracy: cm.accuracy(),
        precision: cm.precision(),
        recall: cm.recall(),
        f1: cm.f1(),
        auc: None,
    }
}

/// `floor(r * 10^decimals + 1/2) / 10^decimals`, computed on integers.
pub fn round_half_up(r: Ratio<u64>, decimals: u32) -> f64 {
    let scale = 10u128.pow(decimals);
    let (num, den) = (*r.numer() as u128, *r.denom() as u128);
    let scaled = (2 * num * scale + den) / (2 * den);
    scaled as f64 / scale as f64
}

/// Mann–Whitney AUC with ties counted one half:
/// `(#{pos > neg} + #{pos = neg}/2) / (n_pos * n_neg)`.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<Ratio<u64>> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::config("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the numerator keeps the half-credit for ties integral.
    let mut twice_wins = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(Ratio::new(twice_wins, 2 * n_pos * n_neg))
}

/// AUC over the patients in `ids`.
pub fn auc_for(scores: &Scores, labels: &Labels, ids: &[String]) -> Result<Ratio<u64>> {
    let mut s = Vec::with_capacity(ids.len());
    let mut l = Vec::with_capacity(ids.len());
    for id in ids {
        s.push(*scores.get(id).ok_or_else(|| Error::Data(format!("no score for {id}")))?);
        l.push(*labels.get(id).ok_or_else(|| Error::Data(format!("no label for {id}")))?);
    }
    compute_auc(&s, &l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdObjective {
    #[default]
    F1,
    Youden,
}

impl FromStr for ThresholdObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f1" => Ok(ThresholdObjective::F1),
            "youden" => Ok(ThresholdObjective::Youden),
            other => Err(Error::config(format!("unknown threshold objective {other:?}"))),
        }
    }
}

impl fmt::Display for ThresholdObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdObjective::F1 => "f1",
            ThresholdObjective::Youden => "youden",
        })
    }
}

fn ser_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn de_extended<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) => match t.as_str() {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
        },
    }
}

/// Decision cutoff on the score axis; positive iff `score >= value`.
/// Unbounded cutoffs serialize as `"inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    #[serde(serialize_with = "ser_extended", deserialize_with = "de_extended")]
    pub value: f64,
    pub objective: ThresholdObjective,
    /// Objective achieved on the training patients.
    pub train_objective: f64,
    pub train_f1: f64,
    /// All training scores were equal.
    pub degenerate: bool,
}

/// Candidate cutoffs: `-inf`, midpoints of consecutive distinct scores, `+inf`.
pub fn threshold_candidates(train_scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = train_scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

fn objective_value(cm: &ConfusionMatrix, objective: ThresholdObjective) -> Ratio<i128> {
    let to_i = |r: Ratio<u64>| Ratio::new(*r.numer() as i128, *r.denom() as i128);
    match objective {
        ThresholdObjective::F1 => to_i(cm.f1()),
        ThresholdObjective::Youden => to_i(cm.recall()) + to_i(cm.specificity()) - Ratio::from_integer(1),
    }
}

fn ratio_f64_u(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn ratio_f64_i(r: Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn calibrate_threshold(scores: &Scores, labels: &Labels, ids: &[String]) -> Result<Threshold> {
    calibrate_threshold_with(scores, labels, ids, ThresholdObjective::F1)
}

/// Exhaustive scan over [`threshold_candidates`] of the training scores.
/// Picks the best objective, then the higher recall, then the smaller cutoff.
pub fn calibrate_threshold_with(
    scores: &Scores,
    labels: &Labels,
    ids: &[String],
    objective: ThresholdObjective,
) -> Result<Threshold> {
    if ids.is_empty() {
        return Err(Error::validation("cannot calibrate a threshold on an empty training set"));
    }
    let mut train = Vec::with_capacity(ids.len());
    for id in ids {
        let s = *scores.get(id).ok_or_else(|| Error::Data(format!("no score for {id}")))?;
        let y = *labels.get(id).ok_or_else(|| Error::Data(format!("no label for {id}")))?;
        if s.is_nan() {
            return Err(Error::Data(format!("NaN score for {id}")));
        }
        train.push((s, y));
    }
    let raw: Vec<f64> = train.iter().map(|t| t.0).collect();
    let candidates = threshold_candidates(&raw);
    let degenerate = candidates.len() == 2;
    if degenerate {
        log::warn!("all training scores are equal; threshold is degenerate");
    }

    let mut best: Option<(Ratio<i128>, Ratio<u64>, f64, ConfusionMatrix)> = None;
    for &t in &candidates {
        let mut cm = ConfusionMatrix::default();
        for &(s, y) in &train {
            match (s >= t, y == 1) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fp += 1,
                (false, true) => cm.fn_ += 1,
                (false, false) => cm.tn += 1,
            }
        }
        let obj = objective_value(&cm, objective);
        let rec = cm.recall();
        let better = match &best {
            None => true,
            Some((bo, br, _, _)) => obj > *bo || (obj == *bo && rec > *br),
        };
        if better {
            best = Some((obj, rec, t, cm));
        }
    }
    let (obj, _, value, cm) = best.expect("at least two candidates");
    Ok(Threshold {
        value,
        objective,
        train_objective: ratio_f64_i(obj),
        train_f1: ratio_f64_u(cm.f1()),
        degenerate,
    })
}

pub fn classify_with_threshold(scores: &Scores, threshold: f64) -> BTreeMap<String, u8> {
    scores
        .iter()
        .map(|(id, &s)| (id.clone(), u8::from(s >= threshold)))
        .collect()
}
