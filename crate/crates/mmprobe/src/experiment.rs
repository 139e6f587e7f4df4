//! Config-driven end-to-end runs.
//!
//! A run expands (dataset, model, condition, sample) in a fixed order,
//! dispatches trials through the gateway, judges the responses, and compiles
//! one metric report per (model, dataset). Records and judgments persist
//! under the output directory; re-running an identical config touches only
//! cache misses, and a killed run resumes from whatever was persisted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condition::{render, Condition, Modality, QuestionFormat, RenderedTrial};
use crate::convert::KnowledgeConverter;
use crate::dataset::{
    dataset_stats, load_manifest, DatasetFormat, DatasetManifest, MANIFEST_SCHEMA_VERSION,
};
use crate::gateway::{
    prompt_digest, run_batch, ChatEndpoint, DiskCache, EndpointConfig, EndpointKind,
    HttpChat, HttpEmbedding, EmbeddingEndpoint, RunRecord,
};
use crate::judging::{judge_batch, Judge, Judgment};
use crate::metrics::{compile_report, JudgmentSet, MetricReport, RecallAtK};
use crate::report;
use crate::retrieval::{ingest_corpus, Index, Paragraph};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset {dataset}: {source}")]
    Dataset {
        dataset: String,
        #[source]
        source: crate::dataset::DatasetError,
    },
    #[error("retrieval ({context}): {source}")]
    Retrieval {
        context: String,
        #[source]
        source: crate::retrieval::RetrievalError,
    },
    #[error("judging model={model} dataset={dataset}: {source}")]
    Judge {
        model: String,
        dataset: String,
        #[source]
        source: crate::judging::JudgeError,
    },
    #[error("endpoint {name}: {source}")]
    Endpoint {
        name: String,
        #[source]
        source: crate::gateway::GatewayError,
    },
    #[error("i/o at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Process exit code class: 2 config, 3 endpoint, 4 validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Endpoint { .. } => 3,
            ExperimentError::Judge { source, .. } => match source {
                crate::judging::JudgeError::Endpoint(_) => 3,
                crate::judging::JudgeError::MissingJudge => 2,
                _ => 4,
            },
            ExperimentError::Retrieval { source, .. } => match source {
                crate::retrieval::RetrievalError::Endpoint(_) => 3,
                _ => 4,
            },
            ExperimentError::Dataset { .. } => 4,
            ExperimentError::Io { .. } => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One model under test: the name sent in request bodies plus the endpoint
/// that serves it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub endpoint: EndpointConfig,
}

/// A condition to expand. `rag_sweep` multiplies the condition over the
/// config's `rag_ns`; an explicit `rag_n` pins a single depth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub modality: Modality,
    pub format: QuestionFormat,
    #[serde(default)]
    pub rag_n: Option<usize>,
    #[serde(default)]
    pub rag_sweep: bool,
}

fn default_rag_ns() -> Vec<usize> {
    vec![1, 3, 5, 10]
}

/// The whole experiment, loaded from a single JSON document. Secrets enter
/// only through environment variable names inside endpoint configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub datasets: Vec<PathBuf>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub judge: Option<EndpointConfig>,
    #[serde(default)]
    pub converter: Option<EndpointConfig>,
    #[serde(default)]
    pub embedder: Option<EndpointConfig>,
    /// JSON Lines paragraph corpus backing RAG conditions and recall.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    pub conditions: Vec<ConditionSpec>,
    #[serde(default = "default_rag_ns")]
    pub rag_ns: Vec<usize>,
    /// Recall@k cutoffs; defaults to `rag_ns` when retrieval is active.
    #[serde(default)]
    pub recall_ks: Option<Vec<usize>>,
    #[serde(default)]
    pub run_seed: u64,
    pub output_dir: PathBuf,
    /// Report GR as max(GR, 0) with a footnote instead of a negative value.
    #[serde(default)]
    pub clamp_gap_rate: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&raw)
            .map_err(|e| ExperimentError::Config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.conditions.is_empty() {
            return Err(ExperimentError::Config("conditions must be non-empty".into()));
        }
        if self.models.is_empty() {
            return Err(ExperimentError::Config("models must be non-empty".into()));
        }
        if !self.rag_ns.windows(2).all(|w| w[0] < w[1]) || self.rag_ns.iter().any(|&n| n == 0) {
            return Err(ExperimentError::Config(
                "rag_ns must be strictly increasing positive integers".into(),
            ));
        }
        for spec in &self.models {
            spec.endpoint.validate().map_err(ExperimentError::Config)?;
        }
        for endpoint in [&self.judge, &self.converter, &self.embedder].into_iter().flatten() {
            endpoint.validate().map_err(ExperimentError::Config)?;
        }
        let wants_rag = self.expanded_conditions().iter().any(|c| c.rag_n > 0);
        if wants_rag && (self.corpus.is_none() || self.embedder.is_none()) {
            return Err(ExperimentError::Config(
                "RAG conditions need both a corpus and an embedder".into(),
            ));
        }
        Ok(())
    }

    /// Conditions in their final, dispatchable form (seeds filled in,
    /// sweeps expanded), in config order.
    pub fn expanded_conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        for spec in &self.conditions {
            let mut base = Condition::new(spec.modality, spec.format);
            if spec.format == QuestionFormat::Shuffled {
                base.shuffle_seed = Some(self.run_seed);
            }
            if spec.rag_sweep {
                for &n in &self.rag_ns {
                    out.push(base.with_rag(n));
                }
            } else {
                out.push(base.with_rag(spec.rag_n.unwrap_or(0)));
            }
        }
        out
    }

    /// Stable id derived from the config content; records from a different
    /// config are never reused.
    pub fn run_id(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..12].to_string()
    }
}

/// Resolved endpoint handles for one run. Built from the config for real
/// runs; tests inject in-process mocks.
#[derive(Default)]
pub struct Endpoints {
    pub chat: BTreeMap<String, ModelEndpoint>,
    pub judge: Option<Judge>,
    pub converter: Option<Arc<KnowledgeConverter>>,
    pub embedder: Option<Arc<dyn EmbeddingEndpoint>>,
}

pub struct ModelEndpoint {
    pub endpoint: Arc<dyn ChatEndpoint>,
    pub max_concurrency: usize,
}

impl Endpoints {
    pub fn with_model(
        mut self,
        name: impl Into<String>,
        endpoint: Arc<dyn ChatEndpoint>,
        max_concurrency: usize,
    ) -> Self {
        self.chat.insert(
            name.into(),
            ModelEndpoint {
                endpoint,
                max_concurrency,
            },
        );
        self
    }

    pub fn with_judge(mut self, judge: Judge) -> Self {
        self.judge = Some(judge);
        self
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn EmbeddingEndpoint>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn with_converter(mut self, converter: Arc<KnowledgeConverter>) -> Self {
        self.converter = Some(converter);
        self
    }
}

/// Builds HTTP endpoints for every model plus judge/converter/embedder,
/// all sharing one response cache under the output directory.
pub fn build_http_endpoints(config: &ExperimentConfig) -> Result<Endpoints, ExperimentError> {
    let cache_dir = config.output_dir.join("cache");
    let cache = DiskCache::new(&cache_dir).map_err(io_err(&cache_dir))?;
    let mut endpoints = Endpoints::default();

    for spec in &config.models {
        let chat = HttpChat::new(spec.endpoint.clone())
            .map_err(|source| ExperimentError::Endpoint {
                name: spec.endpoint.name.clone(),
                source,
            })?
            .with_cache(cache.clone());
        endpoints = endpoints.with_model(
            spec.name.clone(),
            Arc::new(chat),
            spec.endpoint.max_concurrency,
        );
    }

    if let Some(cfg) = &config.judge {
        let model = cfg.model.clone().unwrap_or_else(|| "judge".into());
        let chat = HttpChat::new(cfg.clone())
            .map_err(|source| ExperimentError::Endpoint {
                name: cfg.name.clone(),
                source,
            })?
            .with_cache(cache.clone());
        endpoints = endpoints.with_judge(
            Judge::new(Arc::new(chat), model).with_concurrency(cfg.max_concurrency),
        );
    }

    if let Some(cfg) = &config.converter {
        let model = cfg.model.clone().unwrap_or_else(|| "converter".into());
        let chat = HttpChat::new(cfg.clone())
            .map_err(|source| ExperimentError::Endpoint {
                name: cfg.name.clone(),
                source,
            })?
            .with_cache(cache.clone());
        endpoints =
            endpoints.with_converter(Arc::new(KnowledgeConverter::new(Arc::new(chat), model)));
    }

    if let Some(cfg) = &config.embedder {
        if cfg.kind != EndpointKind::Embedding {
            return Err(ExperimentError::Config(format!(
                "embedder endpoint {} must have kind=embedding",
                cfg.name
            )));
        }
        let embedding = HttpEmbedding::new(cfg.clone()).map_err(|source| {
            ExperimentError::Endpoint {
                name: cfg.name.clone(),
                source,
            }
        })?;
        endpoints = endpoints.with_embedder(Arc::new(embedding));
    }

    Ok(endpoints)
}

/// Knobs that are not part of the experiment definition.
#[derive(Debug, Default, Clone)]
pub struct RunOptions {
    /// Stop after dispatching this many new trials; persisted state stays
    /// valid and a later run resumes. Exercises crash recovery.
    pub max_new_trials: Option<usize>,
}

/// What a run produced.
pub struct RunOutputs {
    pub reports: Vec<MetricReport>,
    pub output_dir: PathBuf,
    /// True when the run stopped early because of `max_new_trials`.
    pub interrupted: bool,
}

pub async fn run_experiment(config: &ExperimentConfig) -> Result<RunOutputs, ExperimentError> {
    config.validate()?;
    let endpoints = build_http_endpoints(config)?;
    run_experiment_with(config, &endpoints, &RunOptions::default()).await
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    fn pair_dir(&self, model: &str, dataset: &str) -> PathBuf {
        self.root
            .join("runs")
            .join(sanitize(model))
            .join(sanitize(dataset))
    }

    fn records(&self, model: &str, dataset: &str) -> PathBuf {
        self.pair_dir(model, dataset).join("records.jsonl")
    }

    fn judgments(&self, model: &str, dataset: &str) -> PathBuf {
        self.pair_dir(model, dataset).join("judgments.jsonl")
    }

    fn judgments_src(&self, model: &str, dataset: &str) -> PathBuf {
        self.pair_dir(model, dataset).join("judgments.src")
    }

    fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn pair_report(&self, model: &str, dataset: &str) -> PathBuf {
        self.reports_dir()
            .join(format!("{}__{}.json", sanitize(dataset), sanitize(model)))
    }

    fn index_dir(&self) -> PathBuf {
        self.root.join("index")
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    let parent = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = parent.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        std::process::id()
    ));
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    let Ok(raw) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializes"));
        out.push('\n');
    }
    out
}

/// Per-dataset retrieval context: the built index plus top hits per
/// knowledge question at the maximum depth any condition needs.
struct RetrievalContext {
    index: Index,
    hits_by_query: BTreeMap<String, Vec<String>>,
}

impl RetrievalContext {
    fn paragraphs_for(&self, query: &str, n: usize) -> Option<Vec<Paragraph>> {
        let ids = self.hits_by_query.get(query)?;
        if ids.len() < n {
            return None;
        }
        Some(
            ids[..n]
                .iter()
                .map(|id| self.index.paragraph(id).expect("hit ids come from index").clone())
                .collect(),
        )
    }
}

/// Runs the full experiment against the supplied endpoints.
pub async fn run_experiment_with(
    config: &ExperimentConfig,
    endpoints: &Endpoints,
    options: &RunOptions,
) -> Result<RunOutputs, ExperimentError> {
    config.validate()?;
    let run_id = config.run_id();
    let paths = RunPaths {
        root: config.output_dir.clone(),
    };
    let conditions = config.expanded_conditions();

    // Load every manifest up front.
    let mut manifests: Vec<DatasetManifest> = Vec::new();
    for path in &config.datasets {
        let (manifest, warnings) = load_manifest(path, MANIFEST_SCHEMA_VERSION)
            .map_err(|source| ExperimentError::Dataset {
                dataset: path.display().to_string(),
                source,
            })?;
        for warning in warnings {
            eprintln!("warning: {warning}");
        }
        manifests.push(manifest);
    }

    // Fail fast when multiple-choice grading would be required but no judge
    // is configured, before a single chat call goes out.
    let needs_judge = manifests
        .iter()
        .any(|m| m.format == DatasetFormat::MultipleChoice)
        && conditions.iter().any(|c| c.format != QuestionFormat::OpenEnded);
    if needs_judge && endpoints.judge.is_none() {
        return Err(ExperimentError::Judge {
            model: "<all>".into(),
            dataset: "<all>".into(),
            source: crate::judging::JudgeError::MissingJudge,
        });
    }

    // Retrieval: build the index once and resolve every knowledge question
    // to its ranked hits at the deepest requested n.
    let max_rag_n = conditions.iter().map(|c| c.rag_n).max().unwrap_or(0);
    let retrieval = if max_rag_n > 0 {
        Some(build_retrieval_context(config, endpoints, &manifests, max_rag_n, &paths).await?)
    } else {
        None
    };

    let mut dispatch_budget = options.max_new_trials;
    let mut interrupted = false;
    let mut reports: Vec<MetricReport> = Vec::new();

    'datasets: for manifest in &manifests {
        // Recall is a per-dataset quantity; compute it when retrieval is on.
        let recall = match (&retrieval, config.recall_ks.as_ref()) {
            (Some(ctx), ks) => {
                let ks: Vec<usize> = ks.cloned().unwrap_or_else(|| config.rag_ns.clone());
                evaluate_recall_cached(ctx, manifest, &ks, endpoints, &paths).await?
            }
            (None, _) => Vec::new(),
        };

        for spec in &config.models {
            let model = &spec.name;
            let endpoint = endpoints.chat.get(model).ok_or_else(|| {
                ExperimentError::Config(format!("no endpoint registered for model {model}"))
            })?;

            let outcome = run_pair(
                manifest,
                model,
                endpoint,
                &conditions,
                retrieval.as_ref(),
                &run_id,
                &paths,
                &mut dispatch_budget,
            )
            .await?;

            let records = match outcome {
                PairOutcome::Complete(records) => records,
                PairOutcome::Interrupted => {
                    interrupted = true;
                    break 'datasets;
                }
            };

            let judgments =
                judgments_for(manifest, model, &records, endpoints.judge.as_ref(), &paths).await?;

            reports.push(compile_pair_report(
                manifest, model, &conditions, &records, &judgments, &recall,
            ));
        }
    }

    if !interrupted {
        let reports_dir = paths.reports_dir();
        for report in &reports {
            write_atomic(
                &paths.pair_report(&report.model, &report.dataset),
                &serde_json::to_string_pretty(report).expect("report serializes"),
            )?;
        }
        write_atomic(
            &reports_dir.join("report.json"),
            &serde_json::to_string_pretty(&reports).expect("reports serialize"),
        )?;
        write_atomic(
            &reports_dir.join("report.md"),
            &report::render_markdown(&reports, config.clamp_gap_rate),
        )?;
    }

    Ok(RunOutputs {
        reports,
        output_dir: config.output_dir.clone(),
        interrupted,
    })
}

async fn build_retrieval_context(
    config: &ExperimentConfig,
    endpoints: &Endpoints,
    manifests: &[DatasetManifest],
    max_rag_n: usize,
    paths: &RunPaths,
) -> Result<RetrievalContext, ExperimentError> {
    let corpus_path = config
        .corpus
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("RAG conditions need a corpus".into()))?;
    let embedder = endpoints
        .embedder
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("RAG conditions need an embedder".into()))?;
    let wrap = |context: &str| {
        let context = context.to_string();
        move |source| ExperimentError::Retrieval { context, source }
    };

    let corpus = ingest_corpus(corpus_path).map_err(wrap("ingest"))?;
    let index = Index::build(&corpus, embedder.as_ref(), 64, Some(&paths.index_dir()))
        .await
        .map_err(wrap("build index"))?;

    let depth = max_rag_n.min(index.len());
    let mut hits_by_query = BTreeMap::new();
    for manifest in manifests {
        for sample in &manifest.samples {
            let Some(query) = &sample.knowledge_question else {
                continue;
            };
            if hits_by_query.contains_key(query) {
                continue;
            }
            let hits = index
                .search(query, depth, embedder.as_ref())
                .await
                .map_err(wrap("search"))?;
            hits_by_query.insert(query.clone(), hits.into_iter().map(|h| h.doc_id).collect());
        }
    }
    Ok(RetrievalContext {
        index,
        hits_by_query,
    })
}

#[derive(Serialize, Deserialize)]
struct RecallCacheFile {
    key: String,
    results: Vec<RecallAtK>,
}

/// Recall over a manifest, memoized on (corpus, embedder, manifest, ks) so
/// an unchanged re-run costs zero embedder calls.
async fn evaluate_recall_cached(
    ctx: &RetrievalContext,
    manifest: &DatasetManifest,
    ks: &[usize],
    endpoints: &Endpoints,
    paths: &RunPaths,
) -> Result<Vec<RecallAtK>, ExperimentError> {
    let eligible = manifest
        .samples
        .iter()
        .any(|s| s.knowledge_question.is_some() && s.gold_doc_ids.as_ref().is_some_and(|g| !g.is_empty()));
    if !eligible || ks.is_empty() {
        return Ok(Vec::new());
    }
    let embedder = endpoints.embedder.as_ref().expect("retrieval context implies embedder");

    let mut hasher = Sha256::new();
    hasher.update(ctx.index.dimension().to_le_bytes());
    hasher.update(embedder.identity().as_bytes());
    hasher.update(serde_json::to_string(ks).expect("ks serialize").as_bytes());
    hasher.update(manifest.to_jsonl().as_bytes());
    let key = hex::encode(hasher.finalize());

    let cache_path = paths
        .index_dir()
        .join(format!("recall-{}.json", sanitize(&manifest.name)));
    if let Ok(raw) = std::fs::read_to_string(&cache_path) {
        if let Ok(cached) = serde_json::from_str::<RecallCacheFile>(&raw) {
            if cached.key == key {
                return Ok(cached.results);
            }
        }
    }

    let results = ctx
        .index
        .evaluate_recall(manifest, ks, embedder.as_ref())
        .await
        .map_err(|source| ExperimentError::Retrieval {
            context: format!("recall on {}", manifest.name),
            source,
        })?;
    write_atomic(
        &cache_path,
        &serde_json::to_string_pretty(&RecallCacheFile {
            key,
            results: results.clone(),
        })
        .expect("cache serializes"),
    )?;
    Ok(results)
}

enum PairOutcome {
    Complete(Vec<RunRecord>),
    Interrupted,
}

/// Renders and dispatches every (condition, sample) trial for one
/// (model, dataset) pair, reusing persisted successful records.
#[allow(clippy::too_many_arguments)]
async fn run_pair(
    manifest: &DatasetManifest,
    model: &str,
    endpoint: &ModelEndpoint,
    conditions: &[Condition],
    retrieval: Option<&RetrievalContext>,
    run_id: &str,
    paths: &RunPaths,
    dispatch_budget: &mut Option<usize>,
) -> Result<PairOutcome, ExperimentError> {
    let records_path = paths.records(model, &manifest.name);
    let existing: Vec<RunRecord> = read_jsonl(&records_path);
    let mut reusable: BTreeMap<(String, String), RunRecord> = existing
        .into_iter()
        .filter(|r| r.run_id == run_id && r.succeeded())
        .map(|r| ((r.sample_id().to_string(), r.condition_key()), r))
        .collect();

    let mut ordered: Vec<RunRecord> = Vec::new();
    let mut interrupted = false;

    'conditions: for condition in conditions {
        let mut pending: Vec<RenderedTrial> = Vec::new();
        let mut slots: Vec<Option<RunRecord>> = Vec::with_capacity(manifest.len());

        for sample in &manifest.samples {
            if let Some(record) = reusable.remove(&(sample.id.clone(), condition.key())) {
                slots.push(Some(record));
                continue;
            }
            if let Some(budget) = dispatch_budget {
                if pending.len() >= *budget {
                    interrupted = true;
                    // Drop unprocessed slots; what is already pending still runs.
                    break;
                }
            }

            let retrieved: Option<Vec<Paragraph>> = if condition.rag_n > 0 {
                let ctx = retrieval.expect("validated: rag conditions imply retrieval");
                match sample
                    .knowledge_question
                    .as_ref()
                    .and_then(|k| ctx.paragraphs_for(k, condition.rag_n))
                {
                    Some(paragraphs) => Some(paragraphs),
                    None => {
                        slots.push(Some(failed_record(
                            run_id, model, sample, condition,
                            "no retrievable knowledge question for this sample",
                        )));
                        continue;
                    }
                }
            } else {
                None
            };

            match render(sample, condition, retrieved.as_deref()) {
                Ok(trial) => {
                    pending.push(trial);
                    slots.push(None);
                }
                Err(e) => slots.push(Some(failed_record(
                    run_id, model, sample, condition, &e.to_string(),
                ))),
            }
        }

        if let Some(budget) = dispatch_budget.as_mut() {
            *budget -= pending.len().min(*budget);
        }

        let fresh = run_batch(
            &pending,
            model,
            endpoint.endpoint.as_ref(),
            endpoint.max_concurrency,
            run_id,
        )
        .await;
        let mut fresh_iter = fresh.into_iter();
        for slot in slots {
            match slot {
                Some(record) => ordered.push(record),
                None => ordered.push(fresh_iter.next().expect("one record per pending trial")),
            }
        }

        if interrupted {
            break 'conditions;
        }
    }

    write_atomic(&records_path, &to_jsonl(&ordered))?;
    if interrupted {
        Ok(PairOutcome::Interrupted)
    } else {
        Ok(PairOutcome::Complete(ordered))
    }
}

fn failed_record(
    run_id: &str,
    model: &str,
    sample: &crate::dataset::Sample,
    condition: &Condition,
    error: &str,
) -> RunRecord {
    // A trial that cannot even render still occupies its (sample, condition)
    // slot so score denominators stay honest.
    let trial = RenderedTrial {
        sample_id: sample.id.clone(),
        condition: *condition,
        prompt_text: String::new(),
        image_attached: false,
        image_ref: None,
        option_permutation: None,
        effective_gold: sample.gold.clone(),
        retrieved_paragraph_ids: Vec::new(),
    };
    RunRecord {
        run_id: run_id.to_string(),
        model: model.to_string(),
        prompt_digest: prompt_digest(""),
        trial,
        response_text: None,
        error: Some(error.to_string()),
        started_at_ms: 0,
        finished_at_ms: 0,
    }
}

/// Judges a pair's records, reusing the persisted judgments when the
/// records file they were derived from is unchanged.
async fn judgments_for(
    manifest: &DatasetManifest,
    model: &str,
    records: &[RunRecord],
    judge: Option<&Judge>,
    paths: &RunPaths,
) -> Result<Vec<Judgment>, ExperimentError> {
    let records_digest = hex::encode(Sha256::digest(to_jsonl(records).as_bytes()));
    let judgments_path = paths.judgments(model, &manifest.name);
    let src_path = paths.judgments_src(model, &manifest.name);

    if std::fs::read_to_string(&src_path).map(|s| s.trim() == records_digest).unwrap_or(false) {
        let cached: Vec<Judgment> = read_jsonl(&judgments_path);
        if cached.len() == records.len() {
            return Ok(cached);
        }
    }

    let judgments = judge_batch(records, manifest, judge)
        .await
        .map_err(|source| ExperimentError::Judge {
            model: model.to_string(),
            dataset: manifest.name.clone(),
            source,
        })?;
    write_atomic(&judgments_path, &to_jsonl(&judgments))?;
    write_atomic(&src_path, &records_digest)?;
    Ok(judgments)
}

fn compile_pair_report(
    manifest: &DatasetManifest,
    model: &str,
    conditions: &[Condition],
    records: &[RunRecord],
    judgments: &[Judgment],
    recall: &[RecallAtK],
) -> MetricReport {
    let mut sets: Vec<JudgmentSet> = Vec::new();
    for condition in conditions {
        let for_condition: Vec<Judgment> = judgments
            .iter()
            .filter(|j| j.condition == *condition)
            .cloned()
            .collect();
        if for_condition.is_empty() {
            continue;
        }
        if let Ok(set) =
            JudgmentSet::from_judgments(&manifest.name, model, *condition, &for_condition)
        {
            sets.push(set);
        }
    }

    let mut failures_by_condition: BTreeMap<String, usize> = BTreeMap::new();
    for record in records.iter().filter(|r| !r.succeeded()) {
        *failures_by_condition.entry(record.condition_key()).or_insert(0) += 1;
    }

    compile_report(
        &manifest.name,
        model,
        &sets,
        Some(manifest),
        recall,
        failures_by_condition,
    )
}

/// Re-grades persisted records (after a judge or manifest change) and
/// rewrites judgments. Reports are not recompiled here.
pub async fn rejudge(
    config: &ExperimentConfig,
    endpoints: &Endpoints,
) -> Result<usize, ExperimentError> {
    let paths = RunPaths {
        root: config.output_dir.clone(),
    };
    let mut pairs = 0usize;
    for path in &config.datasets {
        let (manifest, _) = load_manifest(path, MANIFEST_SCHEMA_VERSION).map_err(|source| {
            ExperimentError::Dataset {
                dataset: path.display().to_string(),
                source,
            }
        })?;
        for spec in &config.models {
            let records: Vec<RunRecord> = read_jsonl(&paths.records(&spec.name, &manifest.name));
            if records.is_empty() {
                continue;
            }
            // Force a fresh grade by invalidating the source digest.
            let _ = std::fs::remove_file(paths.judgments_src(&spec.name, &manifest.name));
            judgments_for(&manifest, &spec.name, &records, endpoints.judge.as_ref(), &paths)
                .await?;
            pairs += 1;
        }
    }
    Ok(pairs)
}

/// Recompiles metric reports from persisted records and judgments.
pub async fn recompile_reports(
    config: &ExperimentConfig,
) -> Result<Vec<MetricReport>, ExperimentError> {
    let paths = RunPaths {
        root: config.output_dir.clone(),
    };
    let conditions = config.expanded_conditions();
    let mut reports = Vec::new();
    for path in &config.datasets {
        let (manifest, _) = load_manifest(path, MANIFEST_SCHEMA_VERSION).map_err(|source| {
            ExperimentError::Dataset {
                dataset: path.display().to_string(),
                source,
            }
        })?;
        for spec in &config.models {
            let records: Vec<RunRecord> = read_jsonl(&paths.records(&spec.name, &manifest.name));
            let judgments: Vec<Judgment> = read_jsonl(&paths.judgments(&spec.name, &manifest.name));
            if judgments.is_empty() {
                continue;
            }
            let recall_path = paths
                .index_dir()
                .join(format!("recall-{}.json", sanitize(&manifest.name)));
            let recall: Vec<RecallAtK> = std::fs::read_to_string(&recall_path)
                .ok()
                .and_then(|raw| serde_json::from_str::<RecallCacheFile>(&raw).ok())
                .map(|f| f.results)
                .unwrap_or_default();
            reports.push(compile_pair_report(
                &manifest, &spec.name, &conditions, &records, &judgments, &recall,
            ));
        }
    }
    let reports_dir = paths.reports_dir();
    for report in &reports {
        write_atomic(
            &paths.pair_report(&report.model, &report.dataset),
            &serde_json::to_string_pretty(report).expect("report serializes"),
        )?;
    }
    write_atomic(
        &reports_dir.join("report.json"),
        &serde_json::to_string_pretty(&reports).expect("reports serialize"),
    )?;
    write_atomic(
        &reports_dir.join("report.md"),
        &report::render_markdown(&reports, config.clamp_gap_rate),
    )?;
    Ok(reports)
}

/// Validates a manifest and prints ingest statistics. Returns the warnings.
pub fn ingest_summary(path: &Path) -> Result<(String, Vec<String>), ExperimentError> {
    let (manifest, warnings) =
        load_manifest(path, MANIFEST_SCHEMA_VERSION).map_err(|source| ExperimentError::Dataset {
            dataset: path.display().to_string(),
            source,
        })?;
    let stats = dataset_stats(&manifest);
    let summary = format!(
        "{} ({}): {} samples\n{}",
        manifest.name,
        manifest.format,
        manifest.len(),
        serde_json::to_string_pretty(&stats).expect("stats serialize")
    );
    Ok((summary, warnings))
}
