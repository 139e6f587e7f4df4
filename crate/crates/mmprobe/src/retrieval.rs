//! Corpus ingestion, dense embedding index, and exact top-n cosine search.
//!
//! The index is a brute-force scan: at desk scale exactness matters more
//! than speed, and it keeps measured recall attributable to the embedder
//! alone. Embeddings persist as a flat `vectors.bin` of little-endian f32
//! rows next to a `header.json` carrying dimension, count, corpus digest
//! and embedder identity, so unchanged corpora never re-embed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetManifest;
use crate::gateway::{EmbeddingEndpoint, GatewayError};
use crate::metrics::{self, RecallAtK};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate doc_id {0:?} in corpus")]
    DuplicateId(String),
    #[error("paragraph {0:?} has empty text")]
    EmptyText(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("requested {n} hits from an index of {size} paragraphs")]
    Arity { n: usize, size: usize },
    #[error("no manifest sample carries both a knowledge question and gold provenance")]
    EmptyGold,
    #[error(transparent)]
    Endpoint(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
}

/// One corpus chunk. The embedding input is the `text` field exactly;
/// `title` only appears in rendered prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    #[serde(skip)]
    pub embedding: Option<Vec<f32>>,
}

impl Paragraph {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
            embedding: None,
        }
    }
}

/// A ranked search result. Ranks start at 1 and scores are non-increasing;
/// ties break by ascending doc_id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// A validated, immutable paragraph collection.
#[derive(Debug, Clone)]
pub struct Corpus {
    paragraphs: Vec<Paragraph>,
}

impl Corpus {
    pub fn new(paragraphs: Vec<Paragraph>) -> Result<Self, RetrievalError> {
        let mut seen = BTreeSet::new();
        for p in &paragraphs {
            if p.text.is_empty() {
                return Err(RetrievalError::EmptyText(p.doc_id.clone()));
            }
            if !seen.insert(p.doc_id.as_str()) {
                return Err(RetrievalError::DuplicateId(p.doc_id.clone()));
            }
        }
        Ok(Self { paragraphs })
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Paragraph> {
        self.paragraphs.iter().find(|p| p.doc_id == doc_id)
    }

    /// Digest over (doc_id, title, text) of every paragraph in order; any
    /// change invalidates persisted embeddings.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.paragraphs {
            for field in [&p.doc_id, &p.title, &p.text] {
                hasher.update((field.len() as u64).to_le_bytes());
                hasher.update(field.as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Loads a JSON Lines corpus of `{doc_id, title, text}` records.
pub fn ingest_corpus(path: &Path) -> Result<Corpus, RetrievalError> {
    let raw = std::fs::read_to_string(path).map_err(|source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut paragraphs = Vec::new();
    for (no, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Paragraph = serde_json::from_str(line).map_err(|e| RetrievalError::Parse {
            line: no + 1,
            message: e.to_string(),
        })?;
        paragraphs.push(p);
    }
    Corpus::new(paragraphs)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct IndexHeader {
    dimension: usize,
    count: usize,
    corpus_digest: String,
    embedder_id: String,
}

/// Dense index over a corpus: every paragraph plus its unit-norm embedding.
#[derive(Debug)]
pub struct Index {
    paragraphs: Vec<Paragraph>,
    dimension: usize,
    corpus_digest: String,
    embedder_id: String,
}

impl Index {
    /// Embeds the corpus in `batch_size` chunks. When `persist_dir` already
    /// holds an index built from the same corpus digest and embedder
    /// identity, the stored vectors are reused and the embedder is not
    /// called at all; otherwise the fresh index is persisted there.
    pub async fn build(
        corpus: &Corpus,
        embedder: &dyn EmbeddingEndpoint,
        batch_size: usize,
        persist_dir: Option<&Path>,
    ) -> Result<Self, RetrievalError> {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let corpus_digest = corpus.digest();
        let embedder_id = embedder.identity();

        if let Some(dir) = persist_dir {
            if let Some(index) = Self::try_load(dir, corpus, &corpus_digest, &embedder_id)? {
                return Ok(index);
            }
        }

        let mut paragraphs = corpus.paragraphs().to_vec();
        let mut dimension = 0usize;
        for chunk in paragraphs.chunks_mut(batch_size) {
            let texts: Vec<String> = chunk.iter().map(|p| p.text.clone()).collect();
            let vectors = embedder.embed(&texts).await?;
            for (p, v) in chunk.iter_mut().zip(vectors) {
                if dimension == 0 {
                    dimension = v.len();
                } else if v.len() != dimension {
                    return Err(GatewayError::DimensionMismatch {
                        first: dimension,
                        other: v.len(),
                    }
                    .into());
                }
                p.embedding = Some(v);
            }
        }

        let index = Self {
            paragraphs,
            dimension,
            corpus_digest,
            embedder_id,
        };
        if let Some(dir) = persist_dir {
            index.persist(dir)?;
        }
        Ok(index)
    }

    fn io_err(path: &Path, source: std::io::Error) -> RetrievalError {
        RetrievalError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn persist(&self, dir: &Path) -> Result<(), RetrievalError> {
        std::fs::create_dir_all(dir).map_err(|e| Self::io_err(dir, e))?;
        let header = IndexHeader {
            dimension: self.dimension,
            count: self.paragraphs.len(),
            corpus_digest: self.corpus_digest.clone(),
            embedder_id: self.embedder_id.clone(),
        };
        let mut bytes = Vec::with_capacity(self.paragraphs.len() * self.dimension * 4);
        for p in &self.paragraphs {
            for x in p.embedding.as_ref().expect("built index has embeddings") {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let vectors_path = dir.join("vectors.bin");
        let header_path = dir.join("header.json");
        let tmp = dir.join(format!(".vectors.{}.tmp", std::process::id()));
        std::fs::write(&tmp, &bytes).map_err(|e| Self::io_err(&tmp, e))?;
        std::fs::rename(&tmp, &vectors_path).map_err(|e| Self::io_err(&vectors_path, e))?;
        std::fs::write(
            &header_path,
            serde_json::to_string_pretty(&header).expect("header serializes"),
        )
        .map_err(|e| Self::io_err(&header_path, e))?;
        Ok(())
    }

    fn try_load(
        dir: &Path,
        corpus: &Corpus,
        corpus_digest: &str,
        embedder_id: &str,
    ) -> Result<Option<Self>, RetrievalError> {
        let header_path = dir.join("header.json");
        let vectors_path = dir.join("vectors.bin");
        if !header_path.exists() || !vectors_path.exists() {
            return Ok(None);
        }
        let header: IndexHeader = match serde_json::from_str(
            &std::fs::read_to_string(&header_path).map_err(|e| Self::io_err(&header_path, e))?,
        ) {
            Ok(h) => h,
            Err(_) => return Ok(None),
        };
        if header.corpus_digest != corpus_digest
            || header.embedder_id != embedder_id
            || header.count != corpus.len()
        {
            return Ok(None);
        }
        let bytes = std::fs::read(&vectors_path).map_err(|e| Self::io_err(&vectors_path, e))?;
        if bytes.len() != header.count * header.dimension * 4 {
            return Ok(None);
        }
        let mut paragraphs = corpus.paragraphs().to_vec();
        for (i, p) in paragraphs.iter_mut().enumerate() {
            let start = i * header.dimension * 4;
            let row: Vec<f32> = bytes[start..start + header.dimension * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            p.embedding = Some(row);
        }
        Ok(Some(Self {
            paragraphs,
            dimension: header.dimension,
            corpus_digest: corpus_digest.to_string(),
            embedder_id: embedder_id.to_string(),
        }))
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn paragraph(&self, doc_id: &str) -> Option<&Paragraph> {
        self.paragraphs.iter().find(|p| p.doc_id == doc_id)
    }

    /// Exhaustive top-n cosine search. Scores every paragraph against the
    /// embedded query; no approximate structure, so results always equal a
    /// full sort of all similarities.
    pub async fn search(
        &self,
        query: &str,
        n: usize,
        embedder: &dyn EmbeddingEndpoint,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if n < 1 || n > self.len() {
            return Err(RetrievalError::Arity { n, size: self.len() });
        }
        let query_vec = embedder
            .embed(std::slice::from_ref(&query.to_string()))
            .await?
            .pop()
            .ok_or_else(|| GatewayError::BadResponse("embedder returned no vector".into()))?;

        let mut scored: Vec<(&Paragraph, f64)> = self
            .paragraphs
            .iter()
            .map(|p| {
                let v = p.embedding.as_ref().expect("built index has embeddings");
                (p, dot(&query_vec, v))
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("cosine scores are finite")
                .then_with(|| a.0.doc_id.cmp(&b.0.doc_id))
        });
        Ok(scored
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(i, (p, score))| RetrievalHit {
                doc_id: p.doc_id.clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    /// Retrieves the top hits for every sample keyed by its knowledge
    /// question, then scores recall@k against the samples' gold provenance.
    pub async fn evaluate_recall(
        &self,
        manifest: &DatasetManifest,
        ks: &[usize],
        embedder: &dyn EmbeddingEndpoint,
    ) -> Result<Vec<RecallAtK>, RetrievalError> {
        let max_k = ks.iter().copied().max().unwrap_or(0);
        assert!(max_k >= 1, "evaluate_recall needs at least one k >= 1");
        let depth = max_k.min(self.len());

        let mut rankings: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut gold: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for sample in &manifest.samples {
            let (Some(k_question), Some(docs)) =
                (&sample.knowledge_question, &sample.gold_doc_ids)
            else {
                continue;
            };
            if docs.is_empty() {
                continue;
            }
            let hits = self.search(k_question, depth, embedder).await?;
            rankings.insert(
                sample.id.clone(),
                hits.into_iter().map(|h| h.doc_id).collect(),
            );
            gold.insert(sample.id.clone(), docs.clone());
        }
        if rankings.is_empty() {
            return Err(RetrievalError::EmptyGold);
        }
        let mut out = Vec::with_capacity(ks.len());
        for &k in ks {
            out.push(metrics::recall_at_k(&rankings, &gold, k)?);
        }
        Ok(out)
    }
}

/// Dot product accumulated in f64. Both inputs are unit-norm, so this is
/// the cosine similarity.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::MockEmbedder;

    fn corpus_of(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| Paragraph::new(format!("d{i:03}"), format!("Title {i}"), format!("text number {i}")))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn duplicate_doc_id_is_rejected() {
        let err = Corpus::new(vec![
            Paragraph::new("a", "t", "x"),
            Paragraph::new("a", "t", "y"),
        ])
        .unwrap_err();
        assert!(matches!(err, RetrievalError::DuplicateId(_)));
    }

    #[test]
    fn empty_corpus_is_valid_but_unsearchable() {
        let corpus = Corpus::new(vec![]).unwrap();
        assert!(corpus.is_empty());
    }

    #[tokio::test]
    async fn self_similar_query_ranks_first_with_unit_score() {
        let corpus = corpus_of(8);
        let embedder = MockEmbedder::new(32);
        let index = Index::build(&corpus, &embedder, 3, None).await.unwrap();
        let hits = index.search("text number 5", 3, &embedder).await.unwrap();
        assert_eq!(hits[0].doc_id, "d005");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits[0].rank, 1);
    }

    #[tokio::test]
    async fn full_width_search_returns_whole_corpus_in_score_order() {
        let corpus = corpus_of(12);
        let embedder = MockEmbedder::new(16);
        let index = Index::build(&corpus, &embedder, 5, None).await.unwrap();
        let hits = index.search("anything", 12, &embedder).await.unwrap();
        assert_eq!(hits.len(), 12);
        let mut ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        ids.sort();
        let expected: Vec<String> = (0..12).map(|i| format!("d{i:03}")).collect();
        assert_eq!(ids, expected.iter().map(String::as_str).collect::<Vec<_>>());
        for pair in hits.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[tokio::test]
    async fn search_arity_errors() {
        let corpus = corpus_of(3);
        let embedder = MockEmbedder::new(8);
        let index = Index::build(&corpus, &embedder, 2, None).await.unwrap();
        assert!(matches!(
            index.search("q", 4, &embedder).await,
            Err(RetrievalError::Arity { n: 4, size: 3 })
        ));
        assert!(matches!(
            index.search("q", 0, &embedder).await,
            Err(RetrievalError::Arity { n: 0, size: 3 })
        ));
    }

    #[tokio::test]
    async fn batching_arithmetic_and_rebuild_skip() {
        let corpus = corpus_of(10);
        let embedder = MockEmbedder::new(8);
        let dir = tempfile::tempdir().unwrap();

        let _ = Index::build(&corpus, &embedder, 4, Some(dir.path()))
            .await
            .unwrap();
        // 10 paragraphs in batches of 4 -> 3 embedder calls.
        assert_eq!(embedder.calls(), 3);

        let reloaded = Index::build(&corpus, &embedder, 4, Some(dir.path()))
            .await
            .unwrap();
        assert_eq!(embedder.calls(), 3, "rebuild with unchanged digest re-embedded");
        assert_eq!(reloaded.len(), 10);
    }

    #[tokio::test]
    async fn persisted_vectors_round_trip_byte_identically() {
        let corpus = corpus_of(6);
        let embedder = MockEmbedder::new(12);
        let dir = tempfile::tempdir().unwrap();
        let built = Index::build(&corpus, &embedder, 2, Some(dir.path()))
            .await
            .unwrap();
        let reloaded = Index::build(&corpus, &embedder, 2, Some(dir.path()))
            .await
            .unwrap();
        for (a, b) in built.paragraphs.iter().zip(reloaded.paragraphs.iter()) {
            let av = a.embedding.as_ref().unwrap();
            let bv = b.embedding.as_ref().unwrap();
            assert_eq!(av.len(), bv.len());
            for (x, y) in av.iter().zip(bv.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[tokio::test]
    async fn corpus_change_invalidates_persisted_index() {
        let embedder = MockEmbedder::new(8);
        let dir = tempfile::tempdir().unwrap();
        let _ = Index::build(&corpus_of(4), &embedder, 2, Some(dir.path()))
            .await
            .unwrap();
        let calls_after_first = embedder.calls();
        let _ = Index::build(&corpus_of(5), &embedder, 2, Some(dir.path()))
            .await
            .unwrap();
        assert!(embedder.calls() > calls_after_first);
    }

    #[tokio::test]
    async fn mixed_dimension_embedder_fails_build() {
        let corpus = corpus_of(2);
        let embedder = MockEmbedder::new(8)
            .with_planted("text number 0", vec![1.0, 0.0, 0.0])
            .with_planted("text number 1", vec![1.0, 0.0, 0.0, 0.0]);
        // Batch size 1 so the ragged pair crosses batches; the per-batch
        // check inside embed() catches same-batch raggedness instead.
        let err = Index::build(&corpus, &embedder, 1, None).await.unwrap_err();
        assert!(matches!(
            err,
            RetrievalError::Endpoint(GatewayError::DimensionMismatch { .. })
        ));
    }
}
