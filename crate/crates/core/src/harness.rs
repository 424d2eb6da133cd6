//! Single- and multiple-editing experiments: warm-up, editing under the
//! alternating protocol, per-seed decisions and metric aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::criterion::{
    closeness_decide, decide, DecisionRecord, Estimate, IdealScoreSet, ThresholdModel, ThresholdOperator,
    DEFAULT_WARMUP_N,
};
use crate::dataset::{Dataset, Entry, EvalPrompt, FactEdit, MetricKind};
use crate::editor::PromptEditor;
use crate::embedding::{EditMemory, Embedder};
use crate::error::{Error, Result};
use crate::gateway::{warmup_scores, Gateway};
use crate::text::fingerprint;

pub const DEFAULT_EVAL_SEEDS: usize = 10;

/// First seed of both the warm-up and the evaluation seed ranges.
pub const DEFAULT_SEED_BASE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BatchSize {
    Fixed(NonZeroUsize),
    All,
}

impl BatchSize {
    pub fn one() -> Self {
        BatchSize::Fixed(NonZeroUsize::MIN)
    }

    /// Entries per batch for a dataset of `n` entries.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            BatchSize::Fixed(k) => k.get(),
            BatchSize::All => n.max(1),
        }
    }

    pub fn is_single(self) -> bool {
        self == BatchSize::one()
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Fixed(k) => write!(f, "{k}"),
            BatchSize::All => f.write_str("all"),
        }
    }
}

impl FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(BatchSize::All);
        }
        s.parse::<NonZeroUsize>()
            .map(BatchSize::Fixed)
            .map_err(|_| Error::InvalidInput(format!("batch size must be a positive integer or \"all\", got {s:?}")))
    }
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => n.to_string().parse(),
            Raw::Str(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditingMode {
    /// Edits are inserted into the memory and prompts go through MPE.
    #[default]
    Mpe,
    /// No edits are inserted; the unedited generator is evaluated.
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub batch_sizes: Vec<BatchSize>,
    pub warmup_n: usize,
    pub eval_seeds: usize,
    pub operator: ThresholdOperator,
    pub seed_base: u64,
    pub mode: EditingMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            batch_sizes: vec![BatchSize::one()],
            warmup_n: DEFAULT_WARMUP_N,
            eval_seeds: DEFAULT_EVAL_SEEDS,
            operator: ThresholdOperator::DEFAULT,
            seed_base: DEFAULT_SEED_BASE,
            mode: EditingMode::Mpe,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_n < 2 {
            return Err(Error::InvalidInput(format!(
                "warmup_n must be at least 2, got {}",
                self.warmup_n
            )));
        }
        if self.eval_seeds < 1 {
            return Err(Error::InvalidInput("eval_seeds must be at least 1".into()));
        }
        if self.batch_sizes.is_empty() {
            return Err(Error::InvalidInput("no batch sizes given".into()));
        }
        Ok(())
    }

    pub fn eval_seed(&self, j: usize) -> u64 {
        self.seed_base.wrapping_add(j as u64)
    }
}

/// Fitted ideal-score statistics, one row per distinct target text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupTable {
    rows: BTreeMap<String, WarmupRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupRow {
    pub target_text: String,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub scores: Vec<f64>,
}

impl WarmupTable {
    pub fn get(&self, target_text: &str) -> Option<&WarmupRow> {
        self.rows.get(target_text)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &WarmupRow> {
        self.rows.values()
    }

    pub fn model(&self, target_text: &str, operator: ThresholdOperator) -> Result<ThresholdModel> {
        let row = self
            .get(target_text)
            .ok_or_else(|| Error::InvalidInput(format!("no warm-up for target {target_text:?}")))?;
        let set = IdealScoreSet::new(fingerprint(target_text), row.scores.clone())?;
        ThresholdModel::fit(&set, operator)
    }
}

/// One evaluated (prompt, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDecision {
    pub entry_id: String,
    pub metric: MetricKind,
    pub prompt_id: String,
    pub seed: u64,
    pub rewritten_prompt: String,
    pub score: f64,
    /// Similarity of the same image to the prompt's outdated text.
    pub edit_score: f64,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub threshold: f64,
    pub success: bool,
}

impl PromptDecision {
    pub fn record(&self) -> DecisionRecord {
        DecisionRecord::new(self.prompt_id.clone(), self.seed, self.score, self.threshold)
    }

    /// The decision this pair would get under another operator.
    pub fn record_with(&self, operator: ThresholdOperator) -> DecisionRecord {
        DecisionRecord::new(
            self.prompt_id.clone(),
            self.seed,
            self.score,
            operator.apply(self.mu_hat, self.sigma_hat),
        )
    }

    /// The decision under the closeness comparison.
    pub fn closeness_record(&self) -> DecisionRecord {
        DecisionRecord {
            prompt_id: self.prompt_id.clone(),
            seed: self.seed,
            score: self.score,
            threshold: self.edit_score,
            success: closeness_decide(self.score, self.edit_score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: MetricKind,
    pub successes: usize,
    pub total: usize,
    /// Percent.
    pub rate: f64,
    /// Standard error of the per-seed rates.
    pub stderr: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityStub {
    pub fid_5k: String,
    pub coco_clip: String,
}

impl Default for QualityStub {
    fn default() -> Self {
        QualityStub {
            fid_5k: "unavailable".into(),
            coco_clip: "unavailable".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub batch_size: BatchSize,
    pub batches: usize,
    pub mode: EditingMode,
    pub operator: ThresholdOperator,
    pub warmup_n: usize,
    pub eval_seeds: usize,
    pub seed_base: u64,
    pub metrics: Vec<MetricSummary>,
    pub score: f64,
    /// Score as a floored percent of the single-editing score.
    pub retention: Option<u32>,
    pub quality: QualityStub,
    #[serde(skip)]
    pub decisions: Vec<PromptDecision>,
}

impl EvaluationReport {
    pub fn rate(&self, metric: MetricKind) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == metric).map(|m| m.rate)
    }
}

/// Geometric mean of percentages; any zero rate gives zero.
pub fn geometric_mean(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::InvalidInput("geometric mean of no rates".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=100.0).contains(*r)) {
        return Err(Error::InvalidInput(format!("rate {r} outside [0, 100]")));
    }
    if rates.contains(&0.0) {
        return Ok(0.0);
    }
    let mean_log = rates.iter().map(|r| r.ln()).sum::<f64>() / rates.len() as f64;
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(mean_log.exp().clamp(lo, hi))
}

/// `floor(100 * score_at_k / score_at_1)`.
pub fn retention(score_at_k: f64, score_at_1: f64) -> Result<u32> {
    if !score_at_1.is_finite() || score_at_1 <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "single-editing score must be positive, got {score_at_1}"
        )));
    }
    if !score_at_k.is_finite() || score_at_k < 0.0 {
        return Err(Error::InvalidInput(format!(
            "score {score_at_k} is not a valid percent"
        )));
    }
    Ok((100.0 * (score_at_k / score_at_1)).floor() as u32)
}

fn insert_once(memory: &mut EditMemory, edit: &FactEdit) -> Result<()> {
    match memory.get(&edit.id) {
        Some(existing) if existing == edit => Ok(()),
        Some(_) => Err(Error::DuplicateEdit(edit.id.clone())),
        None => memory.insert(edit.clone()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Empty,
    FirstEdits,
    SecondEdits,
}

/// Edit memory for one batch that enforces the top-down alternating order:
/// Edit I, the four single-fact metrics, Edit II, then Compo.
#[derive(Debug)]
pub struct BatchSession {
    memory: EditMemory,
    stage: Stage,
    mode: EditingMode,
}

impl BatchSession {
    pub fn new(embedder: Arc<dyn Embedder>, mode: EditingMode) -> Self {
        BatchSession {
            memory: EditMemory::new(embedder),
            stage: Stage::Empty,
            mode,
        }
    }

    pub fn memory(&self) -> &EditMemory {
        &self.memory
    }

    pub fn insert_first<'a>(&mut self, entries: impl IntoIterator<Item = &'a Entry>) -> Result<()> {
        if self.stage != Stage::Empty {
            return Err(Error::ProtocolOrder("Edit I inserted twice".into()));
        }
        if self.mode == EditingMode::Mpe {
            for e in entries {
                insert_once(&mut self.memory, &e.edit1)?;
            }
        }
        self.stage = Stage::FirstEdits;
        Ok(())
    }

    pub fn insert_second<'a>(&mut self, entries: impl IntoIterator<Item = &'a Entry>) -> Result<()> {
        if self.stage != Stage::FirstEdits {
            return Err(Error::ProtocolOrder("Edit II must follow Edit I".into()));
        }
        if self.mode == EditingMode::Mpe {
            for e in entries {
                if let Some(edit2) = &e.edit2 {
                    insert_once(&mut self.memory, edit2)?;
                }
            }
        }
        self.stage = Stage::SecondEdits;
        Ok(())
    }

    /// Checks that prompts of `metric` may be evaluated now.
    pub fn check(&self, metric: MetricKind) -> Result<()> {
        match (metric, self.stage) {
            (MetricKind::Compo, Stage::SecondEdits) => Ok(()),
            (MetricKind::Compo, _) => Err(Error::ProtocolOrder(
                "Compo prompts evaluated before Edit II was inserted".into(),
            )),
            (_, Stage::FirstEdits) => Ok(()),
            (m, Stage::Empty) => Err(Error::ProtocolOrder(format!("{m} prompts evaluated before Edit I"))),
            (m, Stage::SecondEdits) => Err(Error::ProtocolOrder(format!("{m} prompts evaluated after Edit II"))),
        }
    }
}

/// Everything an experiment runs against.
pub struct Experiment<'a> {
    pub gateway: &'a dyn Gateway,
    pub editor: &'a PromptEditor,
    pub embedder: Arc<dyn Embedder>,
    pub config: ExperimentConfig,
}

impl Experiment<'_> {
    /// Fits ideal-score statistics for every distinct target text.
    pub fn warmup(&self, dataset: &Dataset) -> Result<WarmupTable> {
        self.config.validate()?;
        let targets: BTreeSet<&str> = dataset
            .entries
            .iter()
            .flat_map(|e| e.prompts.iter().map(|p| p.target_text.as_str()))
            .collect();
        let rows = targets
            .into_par_iter()
            .map(|t| {
                let set = warmup_scores(
                    self.gateway,
                    &fingerprint(t),
                    t,
                    self.config.warmup_n,
                    self.config.seed_base,
                )?;
                let ThresholdModel { mu_hat, sigma_hat, .. } = ThresholdModel::fit(&set, self.config.operator)?;
                Ok((
                    t.to_string(),
                    WarmupRow {
                        target_text: t.to_string(),
                        mu_hat,
                        sigma_hat,
                        scores: set.scores().to_vec(),
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(WarmupTable { rows })
    }

    fn evaluate_prompt(
        &self,
        session: &BatchSession,
        warmup: &WarmupTable,
        entry: &Entry,
        prompt_id: &str,
        prompt: &EvalPrompt,
    ) -> Result<Vec<PromptDecision>> {
        session.check(prompt.kind)?;
        let model = warmup.model(&prompt.target_text, self.config.operator)?;
        let (rewritten, _) = self.editor.run(session.memory(), &prompt.edit_text)?;
        (0..self.config.eval_seeds)
            .map(|j| {
                let seed = self.config.eval_seed(j);
                let image = self.gateway.generate(&rewritten, seed)?;
                let score = self.gateway.score(&image, &prompt.target_text)?;
                let edit_score = self.gateway.score(&image, &prompt.edit_text)?;
                Ok(PromptDecision {
                    entry_id: entry.id.clone(),
                    metric: prompt.kind,
                    prompt_id: prompt_id.to_string(),
                    seed,
                    rewritten_prompt: rewritten.clone(),
                    score,
                    edit_score,
                    mu_hat: model.mu_hat,
                    sigma_hat: model.sigma_hat,
                    threshold: model.threshold,
                    success: decide(score, model.threshold),
                })
            })
            .collect()
    }

    fn evaluate_stage(
        &self,
        session: &BatchSession,
        warmup: &WarmupTable,
        entries: &[Entry],
        compo: bool,
    ) -> Result<Vec<Vec<PromptDecision>>> {
        entries
            .par_iter()
            .map(|entry| {
                let mut out = Vec::new();
                for (id, prompt) in entry.labeled_prompts() {
                    if (prompt.kind == MetricKind::Compo) == compo {
                        out.extend(self.evaluate_prompt(session, warmup, entry, &id, prompt)?);
                    }
                }
                Ok(out)
            })
            .collect()
    }

    /// Evaluates one batch with a fresh memory. Decisions come back grouped by
    /// entry in dataset order, prompts in entry order.
    fn evaluate_batch(&self, warmup: &WarmupTable, entries: &[Entry]) -> Result<Vec<PromptDecision>> {
        let mut session = BatchSession::new(self.embedder.clone(), self.config.mode);
        session.insert_first(entries)?;
        let first = self.evaluate_stage(&session, warmup, entries, false)?;
        session.insert_second(entries)?;
        let second = self.evaluate_stage(&session, warmup, entries, true)?;
        Ok(first
            .into_iter()
            .zip(second)
            .flat_map(|(a, b)| a.into_iter().chain(b))
            .collect())
    }

    /// Evaluates a single entry on its own memory.
    pub fn run_entry_single(&self, entry: &Entry, warmup: &WarmupTable) -> Result<Vec<PromptDecision>> {
        self.evaluate_batch(warmup, std::slice::from_ref(entry))
    }

    pub fn run_batch(
        &self,
        dataset: &Dataset,
        warmup: &WarmupTable,
        batch_size: BatchSize,
    ) -> Result<EvaluationReport> {
        self.config.validate()?;
        let size = batch_size.resolve(dataset.entries.len());
        let mut decisions = Vec::with_capacity(dataset.prompt_count() * self.config.eval_seeds);
        let mut batches = 0;
        for chunk in dataset.entries.chunks(size) {
            decisions.extend(self.evaluate_batch(warmup, chunk)?);
            batches += 1;
        }
        let metrics = summarize(&dataset.metric_kinds(), &decisions, &self.config)?;
        let rates: Vec<f64> = metrics.iter().map(|m| m.rate).collect();
        Ok(EvaluationReport {
            dataset: dataset.name.clone(),
            batch_size,
            batches,
            mode: self.config.mode,
            operator: self.config.operator,
            warmup_n: self.config.warmup_n,
            eval_seeds: self.config.eval_seeds,
            seed_base: self.config.seed_base,
            score: geometric_mean(&rates)?,
            metrics,
            retention: None,
            quality: QualityStub::default(),
            decisions,
        })
    }

    /// Warm-up once, then one report per configured batch size. Reports for
    /// batch sizes other than 1 carry retention against the single-editing run.
    pub fn run_sweep(&self, dataset: &Dataset) -> Result<(WarmupTable, Vec<EvaluationReport>)> {
        self.config.validate()?;
        let warmup = self.warmup(dataset)?;
        let mut sizes: Vec<BatchSize> = Vec::new();
        for &b in &self.config.batch_sizes {
            if !sizes.contains(&b) {
                sizes.push(b);
            }
        }
        let mut reports = sizes
            .iter()
            .map(|&b| self.run_batch(dataset, &warmup, b))
            .collect::<Result<Vec<_>>>()?;
        if sizes.iter().any(|b| !b.is_single()) {
            let single = match reports.iter().find(|r| r.batch_size.is_single()) {
                Some(r) => r.score,
                None => self.run_batch(dataset, &warmup, BatchSize::one())?.score,
            };
            for r in reports.iter_mut().filter(|r| !r.batch_size.is_single()) {
                r.retention = if single > 0.0 {
                    Some(retention(r.score, single)?)
                } else {
                    log::warn!("single-editing score is 0; retention undefined");
                    None
                };
            }
        }
        Ok((warmup, reports))
    }
}

fn summarize(
    kinds: &[MetricKind],
    decisions: &[PromptDecision],
    config: &ExperimentConfig,
) -> Result<Vec<MetricSummary>> {
    kinds
        .iter()
        .map(|&metric| {
            let rows: Vec<&PromptDecision> = decisions.iter().filter(|d| d.metric == metric).collect();
            if rows.is_empty() {
                return Err(Error::InvalidInput(format!("no {metric} decisions")));
            }
            let successes = rows.iter().filter(|d| d.success).count();
            let per_seed: Vec<f64> = (0..config.eval_seeds)
                .map(|j| {
                    let seed = config.eval_seed(j);
                    let at: Vec<_> = rows.iter().filter(|d| d.seed == seed).collect();
                    100.0 * at.iter().filter(|d| d.success).count() as f64 / at.len().max(1) as f64
                })
                .collect();
            let stderr = if per_seed.len() > 1 {
                let Estimate { sigma_hat, .. } = crate::criterion::estimate(&per_seed)?;
                sigma_hat / (per_seed.len() as f64).sqrt()
            } else {
                0.0
            };
            Ok(MetricSummary {
                metric,
                successes,
                total: rows.len(),
                rate: 100.0 * successes as f64 / rows.len() as f64,
                stderr,
                per_seed,
            })
        })
        .collect()
}
