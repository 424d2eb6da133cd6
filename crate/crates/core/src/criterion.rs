//! Adaptive CLIP threshold.
//!
//! Ideal images are generated from the target prompt; their scores are fitted
//! with a normal distribution and an edit counts as successful when its image
//! scores at least `mu_hat - k * sigma_hat` against the target prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default warm-up sample count per evaluation prompt.
pub const DEFAULT_WARMUP_N: usize = 50;

/// Scores of ideal images for one evaluation prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealScoreSet {
    prompt_id: String,
    scores: Vec<f64>,
}

impl IdealScoreSet {
    pub fn new(prompt_id: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "ideal score set needs at least 2 scores, got {}",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("ideal score set has a non-finite score".into()));
        }
        Ok(IdealScoreSet {
            prompt_id: prompt_id.into(),
            scores,
        })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mu_hat: f64,
    pub sigma_hat: f64,
}

fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Sample mean and Bessel-corrected sample standard deviation.
pub fn estimate(scores: &[f64]) -> Result<Estimate> {
    if scores.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "estimate needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let n = scores.len() as f64;
    let rough = compensated_sum(scores.iter().copied()) / n;
    let mu_hat = rough + compensated_sum(scores.iter().map(|s| s - rough)) / n;
    let ss = compensated_sum(scores.iter().map(|s| (s - mu_hat) * (s - mu_hat)));
    Ok(Estimate {
        mu_hat,
        sigma_hat: (ss / (n - 1.0)).sqrt(),
    })
}

/// Threshold operator `mu_hat - k * sigma_hat`, written `mu-<k>sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdOperator {
    k: f64,
}

impl ThresholdOperator {
    /// Supported multipliers.
    pub const FAMILY: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];

    pub const DEFAULT: ThresholdOperator = ThresholdOperator { k: 2.0 };

    pub fn all() -> Vec<ThresholdOperator> {
        Self::FAMILY.iter().map(|&k| ThresholdOperator { k }).collect()
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn apply(&self, mu_hat: f64, sigma_hat: f64) -> f64 {
        mu_hat - self.k * sigma_hat
    }
}

impl Default for ThresholdOperator {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for ThresholdOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mu-{}sigma", self.k)
    }
}

impl FromStr for ThresholdOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownOperator(s.to_string());
        let k = s
            .trim()
            .strip_prefix("mu-")
            .and_then(|rest| rest.strip_suffix("sigma"))
            .ok_or_else(unknown)?;
        Self::all()
            .into_iter()
            .find(|op| op.k.to_string() == k)
            .ok_or_else(unknown)
    }
}

impl Serialize for ThresholdOperator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdOperator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn threshold(mu_hat: f64, sigma_hat: f64, operator_spec: &str) -> Result<f64> {
    let op: ThresholdOperator = operator_spec.parse()?;
    Ok(op.apply(mu_hat, sigma_hat))
}

/// Success iff `score >= threshold`.
pub fn decide(score: f64, threshold: f64) -> bool {
    score >= threshold
}

/// The closeness rule used before adaptive thresholds: the image is closer to the
/// target text than to the outdated text.
pub fn closeness_decide(target_score: f64, edit_score: f64) -> bool {
    target_score > edit_score
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub operator: ThresholdOperator,
    pub threshold: f64,
}

impl ThresholdModel {
    pub fn fit(scores: &IdealScoreSet, operator: ThresholdOperator) -> Result<Self> {
        let Estimate { mu_hat, sigma_hat } = estimate(scores.scores())?;
        if sigma_hat == 0.0 {
            log::warn!(
                "ideal scores for {} have zero spread; threshold collapses to the mean",
                scores.prompt_id()
            );
        }
        Ok(ThresholdModel {
            mu_hat,
            sigma_hat,
            operator,
            threshold: operator.apply(mu_hat, sigma_hat),
        })
    }

    pub fn with_operator(&self, operator: ThresholdOperator) -> Self {
        ThresholdModel {
            operator,
            threshold: operator.apply(self.mu_hat, self.sigma_hat),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub prompt_id: String,
    pub seed: u64,
    pub score: f64,
    pub threshold: f64,
    pub success: bool,
}

impl DecisionRecord {
    pub fn new(prompt_id: impl Into<String>, seed: u64, score: f64, threshold: f64) -> Self {
        DecisionRecord {
            prompt_id: prompt_id.into(),
            seed,
            score,
            threshold,
            success: decide(score, threshold),
        }
    }
}

pub fn write_decisions_csv<W: std::io::Write>(records: &[DecisionRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r).map_err(|e| Error::Output(format!("decisions: {e}")))?;
    }
    w.flush().map_err(|e| Error::Output(format!("decisions: {e}")))?;
    Ok(())
}

/// Externally produced success/failure labels keyed by `(prompt_id, seed)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    labels: BTreeMap<(String, u64), bool>,
}

impl PseudoLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt_id: impl Into<String>, seed: u64, success: bool) {
        self.labels.insert((prompt_id.into(), seed), success);
    }

    pub fn get(&self, prompt_id: &str, seed: u64) -> Option<bool> {
        self.labels.get(&(prompt_id.to_string(), seed)).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Parses `prompt_id,seed,label` lines with `label` in {success, failure}.
    /// A `prompt_id,seed,label` header, blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = PseudoLabelSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if lineno == 0 && fields.first() == Some(&"prompt_id") {
                continue;
            }
            let bad = |why: &str| Error::Malformed(format!("labels line {}: {why}", lineno + 1));
            let [prompt_id, seed, label] = fields.as_slice() else {
                return Err(bad("expected prompt_id,seed,label"));
            };
            let seed: u64 = seed.parse().map_err(|_| bad("seed is not an integer"))?;
            let success = match label.to_ascii_lowercase().as_str() {
                "success" => true,
                "failure" => false,
                _ => return Err(bad("label must be success or failure")),
            };
            set.insert(*prompt_id, seed, success);
        }
        Ok(set)
    }
}

/// Unweighted mean of the F1 scores of the success and failure classes.
pub fn macro_f1(decisions: &[DecisionRecord], labels: &PseudoLabelSet) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::InvalidInput("macro-F1 over no decisions".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for d in decisions {
        let label = labels.get(&d.prompt_id, d.seed).ok_or_else(|| Error::MissingLabel {
            prompt_id: d.prompt_id.clone(),
            seed: d.seed,
        })?;
        match (d.success, label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    // Both F1 values as fractions, averaged exactly, divided once.
    let miss = u128::from(fp + fn_);
    let (a, b) = (2 * u128::from(tp), 2 * u128::from(tp) + miss);
    let (c, d) = (2 * u128::from(tn), 2 * u128::from(tn) + miss);
    let (num, den) = match (b, d) {
        (0, 0) => (0, 1),
        (0, _) => (c, 2 * d),
        (_, 0) => (a, 2 * b),
        _ => (a * d + c * b, 2 * b * d),
    };
    let g = gcd(num, den).max(1);
    Ok((num / g) as f64 / (den / g) as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Name used for the closeness rule in rankings.
pub const BASELINE_NAME: &str = "current";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub criterion: String,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionRanking {
    pub rows: Vec<RankRow>,
}

impl CriterionRanking {
    pub fn best(&self) -> Option<&RankRow> {
        self.rows.first()
    }

    pub fn position(&self, criterion: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.criterion == criterion)
    }
}

impl fmt::Display for CriterionRanking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<4} {:<14} {:>8}", "rank", "criterion", "macro_f1")?;
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(f, "{:<4} {:<14} {:>8.4}", i + 1, r.criterion, r.macro_f1)?;
        }
        Ok(())
    }
}

/// Macro-F1 of each threshold operator and of the closeness baseline against the
/// pseudo-labels, best first (ties by name).
pub fn validate_criteria(
    decision_sets: &BTreeMap<String, Vec<DecisionRecord>>,
    baseline_decisions: &[DecisionRecord],
    labels: &PseudoLabelSet,
) -> Result<CriterionRanking> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("no pseudo-labels".into()));
    }
    let mut rows = decision_sets
        .iter()
        .map(|(name, d)| {
            Ok(RankRow {
                criterion: name.clone(),
                macro_f1: macro_f1(d, labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.push(RankRow {
        criterion: BASELINE_NAME.to_string(),
        macro_f1: macro_f1(baseline_decisions, labels)?,
    });
    rows.sort_by(|a, b| {
        b.macro_f1
            .total_cmp(&a.macro_f1)
            .then_with(|| a.criterion.cmp(&b.criterion))
    });
    Ok(CriterionRanking { rows })
}

/// Shape diagnostics of an ideal score set. Informational only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn diagnose(scores: &IdealScoreSet) -> Diagnostics {
    let s = scores.scores();
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let m = |p: i32| s.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let m2 = m(2);
    if m2 == 0.0 {
        return Diagnostics {
            skewness: 0.0,
            excess_kurtosis: 0.0,
        };
    }
    Diagnostics {
        skewness: m(3) / m2.powf(1.5),
        excess_kurtosis: m(4) / (m2 * m2) - 3.0,
    }
}
