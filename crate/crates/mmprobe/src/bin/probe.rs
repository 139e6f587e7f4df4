//! Thin command-line front end over the library. All logic lives in
//! `mmprobe`; this binary only parses arguments and maps errors to exit
//! codes (0 ok, 2 config, 3 endpoint, 4 validation).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmprobe::convert::knowledge_question_for;
use mmprobe::dataset::{load_manifest, DatasetManifest, MANIFEST_SCHEMA_VERSION};
use mmprobe::experiment::{
    build_http_endpoints, ingest_summary, recompile_reports, rejudge, run_experiment,
    ExperimentConfig, ExperimentError,
};
use mmprobe::gateway::EndpointKind;
use mmprobe::report::render_markdown;
use mmprobe::retrieval::{ingest_corpus, Index};

#[derive(Parser)]
#[command(
    name = "probe",
    about = "Condition-ablation harness for multimodal QA benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest and print ingest statistics.
    Ingest {
        /// Path to a JSON Lines manifest.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the full experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-grade persisted records against the configured judge.
    Judge {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute metric reports from persisted judgments.
    Metrics {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-render the Markdown report from persisted metric reports.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dense-index maintenance and retrieval evaluation.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Fill in missing knowledge questions and write an augmented manifest.
    ConvertK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    config: PathBuf,
    /// Corpus JSON Lines file; defaults to the config's corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Index directory; defaults to <output_dir>/index.
    #[arg(long)]
    index_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed the corpus and persist the index.
    Build {
        #[command(flatten)]
        common: IndexArgs,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Query the index and print ranked hits.
    Search {
        #[command(flatten)]
        common: IndexArgs,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// Recall@k of the index against a manifest's gold provenance.
    Recall {
        #[command(flatten)]
        common: IndexArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated cutoffs, e.g. 1,3,5,10,50.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10,50")]
        ks: Vec<usize>,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

async fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Ingest { manifest } => {
            let (summary, warnings) = ingest_summary(&manifest)?;
            println!("{summary}");
            for warning in warnings {
                eprintln!("warning: {warning}");
            }
            Ok(())
        }
        Command::Run { config } => {
            let config = ExperimentConfig::load(&config)?;
            let outputs = run_experiment(&config).await?;
            println!(
                "wrote {} report(s) under {}",
                outputs.reports.len(),
                outputs.output_dir.join("reports").display()
            );
            Ok(())
        }
        Command::Judge { config } => {
            let config = ExperimentConfig::load(&config)?;
            let endpoints = build_http_endpoints(&config)?;
            let pairs = rejudge(&config, &endpoints).await?;
            println!("re-judged {pairs} (model, dataset) pair(s)");
            Ok(())
        }
        Command::Metrics { config } => {
            let config = ExperimentConfig::load(&config)?;
            let reports = recompile_reports(&config).await?;
            println!("recompiled {} report(s)", reports.len());
            Ok(())
        }
        Command::Report { config } => {
            let config = ExperimentConfig::load(&config)?;
            let reports = recompile_reports(&config).await?;
            println!("{}", render_markdown(&reports, config.clamp_gap_rate));
            Ok(())
        }
        Command::Index { command } => dispatch_index(command).await,
        Command::ConvertK { config, manifest, out } => {
            let config = ExperimentConfig::load(&config)?;
            let endpoints = build_http_endpoints(&config)?;
            let (loaded, _) = load_manifest(&manifest, MANIFEST_SCHEMA_VERSION).map_err(|source| {
                ExperimentError::Dataset {
                    dataset: manifest.display().to_string(),
                    source,
                }
            })?;
            let mut samples = loaded.samples.clone();
            let mut filled = 0usize;
            for sample in &mut samples {
                if sample.knowledge_question.is_some() {
                    continue;
                }
                let converted = knowledge_question_for(sample, endpoints.converter.as_deref())
                    .await
                    .map_err(|e| match e {
                        mmprobe::convert::ConvertError::Endpoint(source) => {
                            ExperimentError::Endpoint {
                                name: "converter".into(),
                                source,
                            }
                        }
                        other => ExperimentError::Config(other.to_string()),
                    })?;
                if let Some(k) = converted {
                    sample.knowledge_question = Some(k);
                    filled += 1;
                }
            }
            let augmented = DatasetManifest::new(
                loaded.name.clone(),
                loaded.format,
                loaded.expected_count,
                samples,
            )
            .map_err(|source| ExperimentError::Dataset {
                dataset: manifest.display().to_string(),
                source,
            })?;
            augmented.write_jsonl(&out).map_err(|source| ExperimentError::Dataset {
                dataset: out.display().to_string(),
                source,
            })?;
            println!("filled {filled} knowledge question(s); wrote {}", out.display());
            Ok(())
        }
    }
}

async fn dispatch_index(command: IndexCommand) -> Result<(), ExperimentError> {
    let common = match &command {
        IndexCommand::Build { common, .. }
        | IndexCommand::Search { common, .. }
        | IndexCommand::Recall { common, .. } => common,
    };
    let config = ExperimentConfig::load(&common.config)?;
    let corpus_path = common
        .corpus
        .clone()
        .or_else(|| config.corpus.clone())
        .ok_or_else(|| ExperimentError::Config("no corpus given (flag or config)".into()))?;
    let index_dir = common
        .index_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.join("index"));
    let endpoints = build_http_endpoints(&config)?;
    let embedder = endpoints
        .embedder
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("config has no embedder endpoint".into()))?;
    if let Some(cfg) = &config.embedder {
        assert_eq!(cfg.kind, EndpointKind::Embedding);
    }

    let wrap = |context: &str| {
        let context = context.to_string();
        move |source| ExperimentError::Retrieval { context, source }
    };
    let corpus = ingest_corpus(&corpus_path).map_err(wrap("ingest"))?;

    match command {
        IndexCommand::Build { batch_size, .. } => {
            let index = Index::build(&corpus, embedder.as_ref(), batch_size, Some(&index_dir))
                .await
                .map_err(wrap("build"))?;
            println!(
                "indexed {} paragraphs (dim {}) at {}",
                index.len(),
                index.dimension(),
                index_dir.display()
            );
        }
        IndexCommand::Search { query, n, .. } => {
            let index = Index::build(&corpus, embedder.as_ref(), 64, Some(&index_dir))
                .await
                .map_err(wrap("build"))?;
            let hits = index
                .search(&query, n, embedder.as_ref())
                .await
                .map_err(wrap("search"))?;
            for hit in hits {
                let title = index.paragraph(&hit.doc_id).map(|p| p.title.as_str()).unwrap_or("");
                println!("{:>3}. {:.6}  {}  {}", hit.rank, hit.score, hit.doc_id, title);
            }
        }
        IndexCommand::Recall { manifest, ks, .. } => {
            let (loaded, _) = load_manifest(&manifest, MANIFEST_SCHEMA_VERSION).map_err(|source| {
                ExperimentError::Dataset {
                    dataset: manifest.display().to_string(),
                    source,
                }
            })?;
            let index = Index::build(&corpus, embedder.as_ref(), 64, Some(&index_dir))
                .await
                .map_err(wrap("build"))?;
            let results = index
                .evaluate_recall(&loaded, &ks, embedder.as_ref())
                .await
                .map_err(wrap("recall"))?;
            for r in results {
                println!(
                    "recall@{:<3} = {:>5.1}%  (scored {}, excluded {})",
                    r.k,
                    r.rate * 100.0,
                    r.scored,
                    r.excluded
                );
            }
        }
    }
    Ok(())
}
