//! Dataset schema for counterfactual editing benchmarks.
//!
//! One JSON document per dataset:
//!
//! ```json
//! { "name": "...", "schema_version": 1,
//!   "entries": [ { "id": "e000",
//!                  "edit1": { "id": "...", "edit_prompt": "...", "target_prompt": "...", "paraphrases": [] },
//!                  "edit2": { ... } | null,
//!                  "prompts": [ { "kind": "efficacy", "edit_text": "...", "target_text": "..." } ] } ] }
//! ```
//!
//! Entries with both edits follow the five-metric layout (1 efficacy, 5 generality,
//! 3 specificity, 3 kgemap, 3 compo). Entries without `edit2` are the three-metric
//! layout used by role and preference editing sets: exactly one efficacy prompt and
//! no kgemap or compo prompts. Edit `id` and `paraphrases` are optional on input.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::text::{canonical, tokens};

pub const SCHEMA_VERSION: u32 = 1;

/// A single text mapping `edit_prompt -> target_prompt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactEdit {
    pub id: String,
    pub edit_prompt: String,
    pub target_prompt: String,
    /// Known rephrasings of `edit_prompt` that the rule-based router also matches.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paraphrases: Vec<String>,
}

impl FactEdit {
    pub fn new(id: impl Into<String>, edit_prompt: impl Into<String>, target_prompt: impl Into<String>) -> Self {
        FactEdit {
            id: id.into(),
            edit_prompt: edit_prompt.into(),
            target_prompt: target_prompt.into(),
            paraphrases: Vec::new(),
        }
    }

    pub fn with_paraphrases(mut self, paraphrases: Vec<String>) -> Self {
        self.paraphrases = paraphrases;
        self
    }

    /// Checks the edit's own invariants, returning a description of the first broken one.
    pub fn check(&self) -> std::result::Result<(), String> {
        let edit = canonical(&self.edit_prompt);
        let target = canonical(&self.target_prompt);
        if self.id.trim().is_empty() {
            return Err("edit id is empty".into());
        }
        if edit.is_empty() {
            return Err(format!("edit {}: edit_prompt is empty", self.id));
        }
        if target.is_empty() {
            return Err(format!("edit {}: target_prompt is empty", self.id));
        }
        if edit == target {
            return Err(format!("edit {}: edit_prompt equals target_prompt", self.id));
        }
        if self.paraphrases.iter().any(|p| canonical(p).is_empty()) {
            return Err(format!("edit {}: empty paraphrase", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    #[serde(alias = "Efficacy")]
    Efficacy,
    #[serde(alias = "Generality")]
    Generality,
    #[serde(alias = "KgeMap", alias = "kge_map")]
    KgeMap,
    #[serde(alias = "Compo")]
    Compo,
    #[serde(alias = "Specificity")]
    Specificity,
}

impl MetricKind {
    /// Report column order.
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Efficacy,
        MetricKind::Generality,
        MetricKind::KgeMap,
        MetricKind::Compo,
        MetricKind::Specificity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Efficacy => "efficacy",
            MetricKind::Generality => "generality",
            MetricKind::KgeMap => "kgemap",
            MetricKind::Compo => "compo",
            MetricKind::Specificity => "specificity",
        }
    }

    /// Prompt count per entry in the five-metric layout.
    pub fn cake_count(self) -> usize {
        match self {
            MetricKind::Efficacy => 1,
            MetricKind::Generality => 5,
            MetricKind::Specificity | MetricKind::KgeMap | MetricKind::Compo => 3,
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown metric {s:?}")))
    }
}

/// An evaluation prompt `{edit_text / target_text}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub kind: MetricKind,
    /// Fed to the edited model.
    pub edit_text: String,
    /// Ground truth: conditions the ideal images and is the scoring text.
    pub target_text: String,
}

impl EvalPrompt {
    pub fn new(kind: MetricKind, edit_text: impl Into<String>, target_text: impl Into<String>) -> Self {
        EvalPrompt {
            kind,
            edit_text: edit_text.into(),
            target_text: target_text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Entry {
    pub id: String,
    pub edit1: FactEdit,
    pub edit2: Option<FactEdit>,
    pub prompts: Vec<EvalPrompt>,
}

impl Entry {
    /// Prompts paired with their stable ids `<entry>/<metric>/<index within metric>`.
    pub fn labeled_prompts(&self) -> Vec<(String, &EvalPrompt)> {
        let mut seen: BTreeMap<MetricKind, usize> = BTreeMap::new();
        self.prompts
            .iter()
            .map(|p| {
                let n = seen.entry(p.kind).or_default();
                let id = format!("{}/{}/{}", self.id, p.kind, n);
                *n += 1;
                (id, p)
            })
            .collect()
    }

    pub fn count(&self, kind: MetricKind) -> usize {
        self.prompts.iter().filter(|p| p.kind == kind).count()
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.id.trim().is_empty() {
            out.push("entry id is empty".to_string());
        }
        if let Err(e) = self.edit1.check() {
            out.push(format!("edit1: {e}"));
        }
        if let Some(edit2) = &self.edit2 {
            if let Err(e) = edit2.check() {
                out.push(format!("edit2: {e}"));
            }
            if canonical(&self.edit1.target_prompt) == canonical(&edit2.target_prompt) {
                out.push("edit1.target_prompt equals edit2.target_prompt".to_string());
            }
            for kind in MetricKind::ALL {
                let (got, want) = (self.count(kind), kind.cake_count());
                if got != want {
                    out.push(format!("expected {want} {kind} prompts, found {got}"));
                }
            }
        } else {
            if self.count(MetricKind::Efficacy) != 1 {
                out.push(format!(
                    "expected 1 efficacy prompt, found {}",
                    self.count(MetricKind::Efficacy)
                ));
            }
            for kind in [MetricKind::KgeMap, MetricKind::Compo] {
                if self.count(kind) > 0 {
                    out.push(format!("{kind} prompts require edit2"));
                }
            }
        }
        for (pid, p) in self.labeled_prompts() {
            let edit = canonical(&p.edit_text);
            let target = canonical(&p.target_text);
            if edit.is_empty() || target.is_empty() {
                out.push(format!("prompt {pid}: empty text"));
                continue;
            }
            match p.kind {
                MetricKind::Specificity if edit != target => {
                    out.push(format!("prompt {pid}: specificity edit_text must equal target_text"));
                }
                MetricKind::Compo => {
                    if let Some(edit2) = &self.edit2 {
                        if !mentions(&p.edit_text, &self.edit1) || !mentions(&p.edit_text, edit2) {
                            out.push(format!("prompt {pid}: compo prompt must mention both edits"));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }
}

const STOPWORDS: &[&str] = &["a", "an", "the", "of", "at", "in", "on", "and", "for", "to", "s"];

fn content_tokens(text: &str) -> HashSet<String> {
    tokens(text).filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

/// True if `text` shares a content word with the edit prompt or one of its paraphrases.
fn mentions(text: &str, edit: &FactEdit) -> bool {
    let words = content_tokens(text);
    std::iter::once(&edit.edit_prompt)
        .chain(&edit.paraphrases)
        .any(|form| content_tokens(form).iter().any(|t| words.contains(t)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Dataset {
    pub name: String,
    pub schema_version: u32,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn prompt_count(&self) -> usize {
        self.entries.iter().map(|e| e.prompts.len()).sum()
    }

    /// Metrics that occur anywhere in the dataset, in report order.
    pub fn metric_kinds(&self) -> Vec<MetricKind> {
        MetricKind::ALL
            .into_iter()
            .filter(|k| self.entries.iter().any(|e| e.count(*k) > 0))
            .collect()
    }

    /// All invariant violations, in entry order.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(Violation {
                entry: "-".into(),
                rule: format!("unknown schema_version {}", self.schema_version),
            });
        }
        let mut ids = HashSet::new();
        for entry in &self.entries {
            if !ids.insert(entry.id.as_str()) {
                out.push(Violation {
                    entry: entry.id.clone(),
                    rule: "duplicate entry id".into(),
                });
            }
            out.extend(entry.violations().into_iter().map(|rule| Violation {
                entry: entry.id.clone(),
                rule,
            }));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Invariant(violations))
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serializes");
        s.push('\n');
        s
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    name: String,
    schema_version: u32,
    entries: Vec<RawEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    edit1: RawEdit,
    #[serde(default)]
    edit2: Option<RawEdit>,
    prompts: Vec<EvalPrompt>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdit {
    #[serde(default)]
    id: Option<String>,
    edit_prompt: String,
    target_prompt: String,
    #[serde(default)]
    paraphrases: Vec<String>,
}

impl RawEdit {
    fn into_edit(self, default_id: String) -> FactEdit {
        FactEdit {
            id: self.id.unwrap_or(default_id),
            edit_prompt: self.edit_prompt,
            target_prompt: self.target_prompt,
            paraphrases: self.paraphrases,
        }
    }
}

/// Parses and validates a dataset document.
pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Malformed("missing or non-integer schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(Error::UnknownSchemaVersion(u32::try_from(version).unwrap_or(u32::MAX)));
    }
    let raw: RawDataset = serde_json::from_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
    let entries = raw
        .entries
        .into_iter()
        .map(|e| Entry {
            edit1: e.edit1.into_edit(format!("{}/edit1", e.id)),
            edit2: e.edit2.map(|x| x.into_edit(format!("{}/edit2", e.id))),
            id: e.id,
            prompts: e.prompts,
        })
        .collect();
    let dataset = Dataset {
        name: raw.name,
        schema_version: raw.schema_version,
        entries,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes)
}
