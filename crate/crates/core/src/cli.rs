use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mpe_core::chat::{ChatConfig, ChatRouter, HttpChatTransport};
use mpe_core::criterion::{validate_criteria, PseudoLabelSet, ThresholdOperator};
use mpe_core::editor::EditorBackend;
use mpe_core::fixture::generate_fixture_dataset;
use mpe_core::harness::{EditingMode, DEFAULT_EVAL_SEEDS, DEFAULT_SEED_BASE};
use mpe_core::report::{emit_report, read_decisions};
use mpe_core::{
    load_dataset, BatchSize, CacheGateway, EditMemory, Embedder, Experiment, ExperimentConfig, FactEdit, Gateway,
    HashEmbedder, HttpEmbedder, HttpGateway, PromptEditor, RecordingGateway, SurrogateGateway,
};

#[derive(Debug, Parser)]
#[command(
    name = "mpe",
    version,
    about = "Memory-based prompt editing and its evaluation harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a dataset file.
    Validate { dataset: PathBuf },
    /// Write a deterministic synthetic dataset as JSON.
    Fixture {
        #[arg(long, default_value_t = 20)]
        entries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewrite one prompt against an edit memory file.
    Edit {
        prompt: String,
        #[arg(long)]
        memory: PathBuf,
        #[command(flatten)]
        backends: EditorArgs,
    },
    /// Fit ideal-score statistics for every target text of a dataset.
    Warmup {
        dataset: PathBuf,
        #[arg(long, default_value = "surrogate")]
        scorer: String,
        #[arg(long, default_value = "builtin")]
        embedder: String,
        #[arg(long, default_value_t = mpe_core::criterion::DEFAULT_WARMUP_N)]
        warmup_n: usize,
        #[arg(long, default_value_t = DEFAULT_SEED_BASE)]
        seed_base: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run single- or multiple-editing experiments and write report files.
    Run(RunArgs),
    /// Rank threshold operators and the closeness rule against pseudo-labels.
    ValidateCriterion {
        decisions: PathBuf,
        labels: PathBuf,
        #[arg(long)]
        batch_size: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct EditorArgs {
    /// `builtin` or `http:<url>`.
    #[arg(long)]
    embedder: Option<String>,
    /// `rule` or `chat`.
    #[arg(long)]
    editor_backend: Option<String>,
    #[arg(long)]
    chat_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    dataset: PathBuf,
    /// Comma-separated batch sizes, e.g. `1,10,all`.
    #[arg(long)]
    batch_size: Option<String>,
    /// `surrogate`, `cache:<path>` or `http:<url>`.
    #[arg(long)]
    scorer: Option<String>,
    #[command(flatten)]
    backends: EditorArgs,
    #[arg(long)]
    operator: Option<String>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    warmup_n: Option<usize>,
    #[arg(long)]
    eval_seeds: Option<usize>,
    /// Evaluate without inserting any edits.
    #[arg(long)]
    base: bool,
    /// Save every score the run requested as a cache file.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RunFile {
    batch_size: Option<String>,
    scorer: Option<String>,
    embedder: Option<String>,
    editor_backend: Option<String>,
    chat_config: Option<PathBuf>,
    operator: Option<String>,
    seed_base: Option<u64>,
    warmup_n: Option<usize>,
    eval_seeds: Option<usize>,
    base: Option<bool>,
    record: Option<PathBuf>,
}

fn make_embedder(spec: &str) -> anyhow::Result<Arc<dyn Embedder>> {
    match spec.split_once(':') {
        _ if spec == "builtin" => Ok(Arc::new(HashEmbedder::default())),
        Some(("http", url)) => Ok(Arc::new(HttpEmbedder::new(url))),
        _ => Err(mpe_core::Error::InvalidInput(format!("unknown embedder {spec:?}")).into()),
    }
}

fn make_gateway(spec: &str, embedder: Arc<dyn Embedder>) -> anyhow::Result<Arc<dyn Gateway>> {
    match spec.split_once(':') {
        _ if spec == "surrogate" => Ok(Arc::new(SurrogateGateway::new(
            embedder,
            mpe_core::gateway::DEFAULT_EPSILON,
        ))),
        Some(("cache", path)) => Ok(Arc::new(CacheGateway::load(Path::new(path))?)),
        Some(("http", url)) => Ok(Arc::new(HttpGateway::connect(url))),
        _ => Err(mpe_core::Error::InvalidInput(format!("unknown scorer {spec:?}")).into()),
    }
}

fn make_editor(backend: &str, chat_config: Option<&Path>) -> anyhow::Result<PromptEditor> {
    match backend {
        "rule" => Ok(PromptEditor::rule_based()),
        "chat" => {
            let path = chat_config
                .ok_or_else(|| mpe_core::Error::InvalidInput("--editor-backend chat needs --chat-config".into()))?;
            let config = ChatConfig::load(path)?;
            let router = ChatRouter::new(Box::new(HttpChatTransport::new(config)));
            Ok(PromptEditor::new(EditorBackend::Chat(router)))
        }
        other => Err(mpe_core::Error::InvalidInput(format!("unknown editor backend {other:?}")).into()),
    }
}

fn parse_batch_sizes(spec: &str) -> anyhow::Result<Vec<BatchSize>> {
    Ok(spec.split(',').map(str::parse).collect::<Result<Vec<BatchSize>, _>>()?)
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| mpe_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryFile {
    edits: Vec<FactEdit>,
}

fn load_memory(path: &Path, embedder: Arc<dyn Embedder>) -> anyhow::Result<EditMemory> {
    let text = std::fs::read_to_string(path).map_err(|e| mpe_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut memory = EditMemory::new(embedder);
    if text.trim().is_empty() {
        return Ok(memory);
    }
    let file: MemoryFile =
        serde_json::from_str(&text).map_err(|e| mpe_core::Error::Malformed(format!("{}: {e}", path.display())))?;
    for edit in file.edits {
        edit.check()
            .map_err(|why| mpe_core::Error::InvalidInput(format!("edit {}: {why}", edit.id)))?;
        memory.insert(edit)?;
    }
    Ok(memory)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Validate { dataset } => {
            let ds = load_dataset(&dataset)?;
            println!(
                "{}: ok, {} entries, {} prompts",
                dataset.display(),
                ds.entries.len(),
                ds.prompt_count()
            );
        }
        Command::Fixture { entries, seed, out } => {
            let ds = generate_fixture_dataset(entries, seed)?;
            write_output(out.as_deref(), &ds.to_json())?;
        }
        Command::Edit {
            prompt,
            memory,
            backends,
        } => {
            let embedder = make_embedder(backends.embedder.as_deref().unwrap_or("builtin"))?;
            let memory = load_memory(&memory, embedder)?;
            let editor = make_editor(
                backends.editor_backend.as_deref().unwrap_or("rule"),
                backends.chat_config.as_deref(),
            )?;
            let (out, trace) = editor.run(&memory, &prompt)?;
            for step in &trace.steps {
                match &step.rewritten {
                    Some(p) => eprintln!("{}: activating -> {p}", step.edit_id),
                    None => eprintln!("{}: not activating", step.edit_id),
                }
            }
            println!("{out}");
        }
        Command::Warmup {
            dataset,
            scorer,
            embedder,
            warmup_n,
            seed_base,
            out,
        } => {
            let ds = load_dataset(&dataset)?;
            let embedder = make_embedder(&embedder)?;
            let gateway = make_gateway(&scorer, embedder.clone())?;
            let editor = PromptEditor::rule_based();
            let x = Experiment {
                gateway: gateway.as_ref(),
                editor: &editor,
                embedder,
                config: ExperimentConfig {
                    warmup_n,
                    seed_base,
                    ..Default::default()
                },
            };
            let table = x.warmup(&ds)?;
            let mut text = serde_json::to_string_pretty(&table)?;
            text.push('\n');
            write_output(out.as_deref(), &text)?;
        }
        Command::Run(args) => cmd_run(args)?,
        Command::ValidateCriterion {
            decisions,
            labels,
            batch_size,
        } => {
            let rows = read_decisions(&decisions)?;
            let sizes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.batch_size.as_str()).collect();
            let chosen = match (&batch_size, sizes.len()) {
                (Some(b), _) => b.clone(),
                (None, 0 | 1) => sizes.iter().next().map(|s| s.to_string()).unwrap_or_default(),
                (None, _) => {
                    return Err(mpe_core::Error::InvalidInput(format!(
                        "decisions cover batch sizes {sizes:?}; pick one with --batch-size"
                    ))
                    .into())
                }
            };
            let decisions: Vec<_> = rows
                .into_iter()
                .filter(|r| r.batch_size == chosen)
                .map(|r| r.into_decision())
                .collect();
            let label_text = std::fs::read_to_string(&labels).map_err(|e| mpe_core::Error::Io {
                path: labels.clone(),
                source: e,
            })?;
            let labels = PseudoLabelSet::parse(&label_text)?;
            let sets: BTreeMap<String, Vec<_>> = ThresholdOperator::all()
                .into_iter()
                .map(|op| (op.to_string(), decisions.iter().map(|d| d.record_with(op)).collect()))
                .collect();
            let baseline: Vec<_> = decisions.iter().map(|d| d.closeness_record()).collect();
            let ranking = validate_criteria(&sets, &baseline, &labels)?;
            print!("{ranking}");
        }
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| mpe_core::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str::<RunFile>(&text)
                .map_err(|e| mpe_core::Error::Malformed(format!("{}: {e}", path.display())))?
        }
        None => RunFile::default(),
    };
    let batch = args.batch_size.or(file.batch_size).unwrap_or_else(|| "1".into());
    let scorer = args.scorer.or(file.scorer).unwrap_or_else(|| "surrogate".into());
    let embedder_spec = args
        .backends
        .embedder
        .or(file.embedder)
        .unwrap_or_else(|| "builtin".into());
    let backend = args
        .backends
        .editor_backend
        .or(file.editor_backend)
        .unwrap_or_else(|| "rule".into());
    let chat_config = args.backends.chat_config.or(file.chat_config);
    let operator: ThresholdOperator = match args.operator.or(file.operator) {
        Some(s) => s.parse()?,
        None => ThresholdOperator::DEFAULT,
    };
    let record = args.record.or(file.record);
    let config = ExperimentConfig {
        batch_sizes: parse_batch_sizes(&batch)?,
        warmup_n: args
            .warmup_n
            .or(file.warmup_n)
            .unwrap_or(mpe_core::criterion::DEFAULT_WARMUP_N),
        eval_seeds: args.eval_seeds.or(file.eval_seeds).unwrap_or(DEFAULT_EVAL_SEEDS),
        operator,
        seed_base: args.seed_base.or(file.seed_base).unwrap_or(DEFAULT_SEED_BASE),
        mode: if args.base || file.base.unwrap_or(false) {
            EditingMode::Base
        } else {
            EditingMode::Mpe
        },
    };
    config.validate()?;

    let ds = load_dataset(&args.dataset)?;
    let embedder = make_embedder(&embedder_spec)?;
    let inner = make_gateway(&scorer, embedder.clone())?;
    let recorder = record.as_ref().map(|_| RecordingGateway::new(inner.clone()));
    let gateway: &dyn Gateway = match &recorder {
        Some(r) => r,
        None => inner.as_ref(),
    };
    let editor = make_editor(&backend, chat_config.as_deref())?;
    let x = Experiment {
        gateway,
        editor: &editor,
        embedder,
        config,
    };
    let (_, reports) = x.run_sweep(&ds)?;
    if let (Some(path), Some(r)) = (&record, &recorder) {
        r.save(path)?;
        log::info!("recorded {} scores to {}", r.len(), path.display());
    }
    let files = emit_report(&reports, &args.out)?;
    for r in &reports {
        let rates: Vec<String> = r
            .metrics
            .iter()
            .map(|m| format!("{}={:.2}", m.metric, m.rate))
            .collect();
        let retention = r.retention.map(|p| format!(" retention={p}%")).unwrap_or_default();
        println!(
            "batch {}: {} score={:.2}{retention}",
            r.batch_size,
            rates.join(" "),
            r.score
        );
    }
    for f in files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}
