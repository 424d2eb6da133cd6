//! Memory-based prompt editing for text-to-image knowledge editing, and the
//! harness that evaluates it with adaptive CLIP thresholds.

pub mod chat;
pub mod criterion;
pub mod dataset;
pub mod editor;
pub mod embedding;
pub mod error;
pub mod fixture;
pub mod gateway;
pub mod harness;
mod http;
pub mod report;
pub mod text;

pub use criterion::{estimate, macro_f1, threshold, validate_criteria, DecisionRecord, ThresholdOperator};
pub use dataset::{load_dataset, parse_dataset, Dataset, Entry, EvalPrompt, FactEdit, MetricKind};
pub use editor::{edited_generate, EditTrace, PromptEditor, RouterVerdict};
pub use embedding::{EditMemory, Embedder, HashEmbedder};
pub use error::{Error, Result};
pub use gateway::{CacheGateway, Gateway, HttpGateway, RecordingGateway, SurrogateGateway};
pub use harness::{geometric_mean, retention, BatchSize, EvaluationReport, Experiment, ExperimentConfig};
pub use http::HttpEmbedder;
