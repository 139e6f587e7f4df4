//! Diagnostic harness for multimodal QA benchmarks.
//!
//! Answers two questions about a benchmark and a model: how much of the
//! score survives when the image is withheld, the options are shuffled or
//! removed; and how much of the remaining error is missing world knowledge
//! in the language backbone rather than failed perception. The same
//! machinery measures how retrieval augmentation closes the knowledge gap.
//!
//! The crate is organized around the run pipeline:
//!
//! - [`dataset`]: JSON Lines manifests and the sample data model.
//! - [`condition`]: renders each (sample, condition) into an exact prompt.
//! - [`gateway`]: OpenAI-compatible chat/embedding clients with cache,
//!   retry and bounded concurrency.
//! - [`judging`]: rule matching and LLM-judge grading.
//! - [`metrics`]: score rate, gap rate, sufficiency/necessity ratios,
//!   retrieval-augmented score rates, recall@k, random-guess baseline.
//! - [`retrieval`]: corpus ingestion and exact cosine top-n search.
//! - [`convert`]: knowledge-question generation.
//! - [`mock`]: deterministic fake endpoints, in-process and over HTTP.
//! - [`experiment`] / [`report`]: config-driven orchestration and the
//!   rendered tables.
//!
//! Each major capability has a runnable example under `examples/`.

pub mod condition;
pub mod convert;
pub mod dataset;
pub mod experiment;
pub mod gateway;
pub mod judging;
pub mod metrics;
pub mod mock;
pub mod prompts;
pub mod report;
pub mod retrieval;

pub use condition::{render, Condition, Modality, QuestionFormat, RenderedTrial};
pub use dataset::{load_manifest, DatasetFormat, DatasetManifest, GoldAnswer, Sample};
pub use gateway::{ChatEndpoint, EmbeddingEndpoint, EndpointConfig, RunRecord};
pub use judging::{judge_batch, Judge, Judgment};
pub use metrics::{JudgmentSet, MetricReport};
pub use retrieval::{Corpus, Index, Paragraph, RetrievalHit};
