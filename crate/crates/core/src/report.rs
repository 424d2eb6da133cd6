//! Report files: `report.json`, `decisions.csv` and `curves.tsv`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{EvaluationReport, PromptDecision};

pub const REPORT_JSON: &str = "report.json";
pub const DECISIONS_CSV: &str = "decisions.csv";
pub const CURVES_TSV: &str = "curves.tsv";

#[derive(Serialize)]
struct ReportFile<'a> {
    runs: &'a [EvaluationReport],
}

pub fn render_json(reports: &[EvaluationReport]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&ReportFile { runs: reports })
        .map_err(|e| Error::Output(format!("report: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_decisions<W: Write>(reports: &[EvaluationReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Output(format!("decisions: {e}"));
    w.write_record([
        "batch_size",
        "entry_id",
        "metric",
        "prompt_id",
        "seed",
        "rewritten_prompt",
        "score",
        "edit_score",
        "mu_hat",
        "sigma_hat",
        "threshold",
        "success",
    ])
    .map_err(err)?;
    for r in reports {
        let batch = r.batch_size.to_string();
        for d in &r.decisions {
            w.write_record([
                batch.as_str(),
                &d.entry_id,
                d.metric.as_str(),
                &d.prompt_id,
                &d.seed.to_string(),
                &d.rewritten_prompt,
                &d.score.to_string(),
                &d.edit_score.to_string(),
                &d.mu_hat.to_string(),
                &d.sigma_hat.to_string(),
                &d.threshold.to_string(),
                &d.success.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Output(format!("decisions: {e}")))
}

/// Rows of `metric, batch_size, rate, stderr`, one x-value per batch size.
pub fn render_curves(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("metric\tbatch_size\trate\tstderr\n");
    let mut rows: Vec<(usize, &EvaluationReport, &crate::harness::MetricSummary)> = Vec::new();
    for r in reports {
        for m in &r.metrics {
            rows.push((m.metric as usize, r, m));
        }
    }
    rows.sort_by_key(|(k, _, _)| *k);
    for (_, r, m) in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\n",
            m.metric, r.batch_size, m.rate, m.stderr
        ));
    }
    for r in reports {
        out.push_str(&format!("score\t{}\t{:.4}\t\n", r.batch_size, r.score));
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the three report files into `dir`, creating it if needed.
pub fn emit_report(reports: &[EvaluationReport], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(REPORT_JSON);
    write_file(&json, render_json(reports)?.as_bytes())?;
    let csv_path = dir.join(DECISIONS_CSV);
    let mut buf = Vec::new();
    write_decisions(reports, &mut buf)?;
    write_file(&csv_path, &buf)?;
    let curves = dir.join(CURVES_TSV);
    write_file(&curves, render_curves(reports).as_bytes())?;
    Ok(vec![json, csv_path, curves])
}

/// One row of a decisions file read back for criterion validation.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct DecisionLogRow {
    pub batch_size: String,
    pub entry_id: String,
    pub metric: crate::dataset::MetricKind,
    pub prompt_id: String,
    pub seed: u64,
    pub rewritten_prompt: String,
    pub score: f64,
    pub edit_score: f64,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub threshold: f64,
    pub success: bool,
}

impl DecisionLogRow {
    pub fn into_decision(self) -> PromptDecision {
        PromptDecision {
            entry_id: self.entry_id,
            metric: self.metric,
            prompt_id: self.prompt_id,
            seed: self.seed,
            rewritten_prompt: self.rewritten_prompt,
            score: self.score,
            edit_score: self.edit_score,
            mu_hat: self.mu_hat,
            sigma_hat: self.sigma_hat,
            threshold: self.threshold,
            success: self.success,
        }
    }
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionLogRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<DecisionLogRow>, _>>()
        .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}
