//! Canonical data model for benchmark items and JSON Lines manifest ingestion.
//!
//! A manifest file starts with a header line
//! `{"__manifest__": {"name": ..., "format": ..., "expected_count": ...}}`
//! followed by one sample object per line. See [`load_manifest`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Manifest schema version understood by this build.
pub const MANIFEST_SCHEMA_VERSION: &str = "1";

/// Errors raised while ingesting or validating a dataset manifest.
#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error for sample {sample_id}: {message}")]
    Validation { sample_id: String, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("no samples carry subject {0:?}")]
    UnknownSubject(String),
}

/// Whether a manifest holds multiple-choice or open-ended items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    OpenEnded,
    MultipleChoice,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetFormat::OpenEnded => write!(f, "open_ended"),
            DatasetFormat::MultipleChoice => write!(f, "multiple_choice"),
        }
    }
}

/// Gold answer: acceptable answer strings plus, for multiple choice, the
/// index of the correct option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub aliases: Vec<String>,
    #[serde(default)]
    pub letter_index: Option<usize>,
}

impl GoldAnswer {
    pub fn open(aliases: Vec<String>) -> Self {
        Self { aliases, letter_index: None }
    }

    pub fn choice(letter_index: usize, aliases: Vec<String>) -> Self {
        Self { aliases, letter_index: Some(letter_index) }
    }
}

/// One benchmark item.
///
/// `image` is a file path or URL; it is absent only for text-only probes.
/// `knowledge_question` is the text-only reformulation of the item, when known.
/// `entity` names the image subject for placeholder substitution, and
/// `gold_doc_ids` lists provenance paragraphs for retrieval recall.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub dataset: String,
    #[serde(default)]
    pub image: Option<String>,
    pub question: String,
    #[serde(default)]
    pub options: Option<Vec<String>>,
    pub gold: GoldAnswer,
    #[serde(default)]
    pub knowledge_question: Option<String>,
    #[serde(default)]
    pub entity: Option<String>,
    #[serde(default)]
    pub gold_doc_ids: Option<BTreeSet<String>>,
    #[serde(default)]
    pub subject: Option<String>,
}

impl Sample {
    pub fn is_multiple_choice(&self) -> bool {
        self.options.is_some()
    }

    /// The body text of the gold option. `None` for open-ended samples.
    pub fn gold_option_body(&self) -> Option<&str> {
        let options = self.options.as_deref()?;
        let idx = self.gold.letter_index?;
        options.get(idx).map(String::as_str)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let fail = |message: String| DatasetError::Validation {
            sample_id: self.id.clone(),
            message,
        };
        if self.id.is_empty() {
            return Err(DatasetError::Validation {
                sample_id: "<empty>".into(),
                message: "sample id must be non-empty".into(),
            });
        }
        if self.gold.aliases.iter().any(String::is_empty) {
            return Err(fail("gold.aliases contains an empty string".into()));
        }
        match &self.options {
            Some(options) => {
                if options.len() < 2 || options.len() > 26 {
                    return Err(fail(format!(
                        "option count {} outside [2, 26]",
                        options.len()
                    )));
                }
                match self.gold.letter_index {
                    Some(idx) if idx < options.len() => {}
                    Some(idx) => {
                        return Err(fail(format!(
                            "gold.letter_index {} out of range for {} options",
                            idx,
                            options.len()
                        )))
                    }
                    None => {
                        return Err(fail(
                            "multiple-choice sample lacks gold.letter_index".into(),
                        ))
                    }
                }
            }
            None => {
                if self.gold.letter_index.is_some() {
                    return Err(fail(
                        "gold.letter_index present on a sample without options".into(),
                    ));
                }
                if self.gold.aliases.is_empty() {
                    return Err(fail(
                        "open-ended sample must carry at least one gold alias".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Header line payload. Serialized as `{"__manifest__": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    name: String,
    format: DatasetFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expected_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema_version: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "__manifest__")]
    manifest: ManifestHeader,
}

/// A validated, immutable dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub format: DatasetFormat,
    pub expected_count: Option<usize>,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    /// Builds a manifest from parts, enforcing every sample invariant.
    pub fn new(
        name: impl Into<String>,
        format: DatasetFormat,
        expected_count: Option<usize>,
        samples: Vec<Sample>,
    ) -> Result<Self, DatasetError> {
        let manifest = Self {
            name: name.into(),
            format,
            expected_count,
            samples,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for sample in &self.samples {
            sample.validate()?;
            if !seen.insert(sample.id.as_str()) {
                return Err(DatasetError::DuplicateId(sample.id.clone()));
            }
            match self.format {
                DatasetFormat::MultipleChoice if sample.options.is_none() => {
                    return Err(DatasetError::Validation {
                        sample_id: sample.id.clone(),
                        message: "multiple_choice manifest contains a sample without options"
                            .into(),
                    })
                }
                DatasetFormat::OpenEnded if sample.options.is_some() => {
                    return Err(DatasetError::Validation {
                        sample_id: sample.id.clone(),
                        message: "open_ended manifest contains a sample with options".into(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Serializes to the JSON Lines manifest format (header line + one
    /// sample per line). `load_manifest` on the output reproduces `self`.
    pub fn to_jsonl(&self) -> String {
        let header = HeaderLine {
            manifest: ManifestHeader {
                name: self.name.clone(),
                format: self.format,
                expected_count: self.expected_count,
                schema_version: Some(MANIFEST_SCHEMA_VERSION.to_string()),
            },
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for sample in &self.samples {
            out.push_str(&serde_json::to_string(sample).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Non-fatal observations from ingestion, e.g. an `expected_count` mismatch.
pub type IngestWarning = String;

/// Loads and validates a JSON Lines manifest.
///
/// Order of samples is preserved. An `expected_count` mismatch is reported
/// as a warning, not an error, because published dataset sizes are not
/// always internally consistent.
pub fn load_manifest(
    path: &Path,
    schema_version: &str,
) -> Result<(DatasetManifest, Vec<IngestWarning>), DatasetError> {
    let raw = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&raw, schema_version)
}

/// Parses manifest text. Separated from I/O so round-trip tests can stay
/// in memory.
pub fn parse_manifest(
    raw: &str,
    schema_version: &str,
) -> Result<(DatasetManifest, Vec<IngestWarning>), DatasetError> {
    let mut lines = raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());

    let (header_no, header_line) = lines.next().ok_or(DatasetError::Parse {
        line: 1,
        message: "empty manifest: missing __manifest__ header line".into(),
    })?;
    let header: HeaderLine =
        serde_json::from_str(header_line).map_err(|e| DatasetError::Parse {
            line: header_no + 1,
            message: format!("bad __manifest__ header: {e}"),
        })?;
    let header = header.manifest;
    if let Some(version) = &header.schema_version {
        if version != schema_version {
            return Err(DatasetError::Parse {
                line: header_no + 1,
                message: format!(
                    "manifest schema version {version:?} does not match expected {schema_version:?}"
                ),
            });
        }
    }

    let mut samples = Vec::new();
    for (no, line) in lines {
        let sample: Sample = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: no + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }

    let manifest = DatasetManifest::new(header.name, header.format, header.expected_count, samples)?;

    let mut warnings = Vec::new();
    if let Some(expected) = manifest.expected_count {
        if expected != manifest.len() {
            warnings.push(format!(
                "manifest {:?} declares expected_count {} but holds {} samples",
                manifest.name,
                expected,
                manifest.len()
            ));
        }
    }
    Ok((manifest, warnings))
}

/// Keeps only samples whose subject is in `subjects` and which reference a
/// single image. Returns the filtered manifest plus per-subject counts.
///
/// Errors with [`DatasetError::UnknownSubject`] if a requested subject
/// matches no sample at all.
pub fn filter_mmmu_subset(
    manifest: &DatasetManifest,
    subjects: &[String],
) -> Result<(DatasetManifest, BTreeMap<String, usize>), DatasetError> {
    for wanted in subjects {
        let known = manifest
            .samples
            .iter()
            .any(|s| s.subject.as_deref() == Some(wanted.as_str()));
        if !known {
            return Err(DatasetError::UnknownSubject(wanted.clone()));
        }
    }

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let kept: Vec<Sample> = manifest
        .samples
        .iter()
        .filter(|s| {
            let subject_ok = s
                .subject
                .as_deref()
                .map(|sub| subjects.iter().any(|w| w == sub))
                .unwrap_or(false);
            subject_ok && s.image.is_some()
        })
        .cloned()
        .collect();
    for sample in &kept {
        if let Some(subject) = &sample.subject {
            *counts.entry(subject.clone()).or_insert(0) += 1;
        }
    }

    let filtered = DatasetManifest::new(
        manifest.name.clone(),
        manifest.format,
        None,
        kept,
    )?;
    Ok((filtered, counts))
}

/// Summary counts over a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub total: usize,
    pub multiple_choice: usize,
    pub open_ended: usize,
    pub with_image: usize,
    pub with_knowledge_question: usize,
    pub with_entity: usize,
    pub with_provenance: usize,
    pub by_subject: BTreeMap<String, usize>,
}

pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let mut stats = DatasetStats {
        total: manifest.len(),
        multiple_choice: 0,
        open_ended: 0,
        with_image: 0,
        with_knowledge_question: 0,
        with_entity: 0,
        with_provenance: 0,
        by_subject: BTreeMap::new(),
    };
    for sample in &manifest.samples {
        if sample.is_multiple_choice() {
            stats.multiple_choice += 1;
        } else {
            stats.open_ended += 1;
        }
        if sample.image.is_some() {
            stats.with_image += 1;
        }
        if sample.knowledge_question.is_some() {
            stats.with_knowledge_question += 1;
        }
        if sample.entity.is_some() {
            stats.with_entity += 1;
        }
        if sample
            .gold_doc_ids
            .as_ref()
            .map(|g| !g.is_empty())
            .unwrap_or(false)
        {
            stats.with_provenance += 1;
        }
        if let Some(subject) = &sample.subject {
            *stats.by_subject.entry(subject.clone()).or_insert(0) += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc_sample(id: &str) -> Sample {
        Sample {
            id: id.into(),
            dataset: "demo".into(),
            image: Some(format!("images/{id}.png")),
            question: format!("Question for {id}?"),
            options: Some(vec!["alpha".into(), "beta".into(), "gamma".into()]),
            gold: GoldAnswer::choice(1, vec!["beta".into()]),
            knowledge_question: None,
            entity: None,
            gold_doc_ids: None,
            subject: None,
        }
    }

    fn open_sample(id: &str) -> Sample {
        Sample {
            id: id.into(),
            dataset: "demo".into(),
            image: Some(format!("images/{id}.png")),
            question: format!("Open question for {id}?"),
            options: None,
            gold: GoldAnswer::open(vec!["answer".into()]),
            knowledge_question: None,
            entity: None,
            gold_doc_ids: None,
            subject: None,
        }
    }

    #[test]
    fn well_formed_manifest_preserves_order() {
        let manifest = DatasetManifest::new(
            "demo",
            DatasetFormat::MultipleChoice,
            Some(3),
            vec![mc_sample("q1"), mc_sample("q2"), mc_sample("q3")],
        )
        .unwrap();
        let (loaded, warnings) = parse_manifest(&manifest.to_jsonl(), MANIFEST_SCHEMA_VERSION).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(loaded.len(), 3);
        let ids: Vec<&str> = loaded.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["q1", "q2", "q3"]);
    }

    #[test]
    fn duplicate_id_is_rejected_by_name() {
        let err = DatasetManifest::new(
            "demo",
            DatasetFormat::MultipleChoice,
            None,
            vec![mc_sample("q1"), mc_sample("q1")],
        )
        .unwrap_err();
        match err {
            DatasetError::DuplicateId(id) => assert_eq!(id, "q1"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn mc_manifest_with_optionless_sample_fails_validation() {
        let err = DatasetManifest::new(
            "demo",
            DatasetFormat::MultipleChoice,
            None,
            vec![mc_sample("q1"), open_sample("q2")],
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::Validation { .. }));
    }

    #[test]
    fn expected_count_mismatch_warns_but_loads() {
        let manifest = DatasetManifest::new(
            "demo",
            DatasetFormat::OpenEnded,
            Some(5),
            vec![open_sample("a"), open_sample("b")],
        )
        .unwrap();
        let (loaded, warnings) = parse_manifest(&manifest.to_jsonl(), MANIFEST_SCHEMA_VERSION).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("expected_count 5"));
    }

    #[test]
    fn schema_version_mismatch_is_a_parse_error() {
        let manifest =
            DatasetManifest::new("demo", DatasetFormat::OpenEnded, None, vec![open_sample("a")])
                .unwrap();
        let err = parse_manifest(&manifest.to_jsonl(), "999").unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 1, .. }));
    }

    #[test]
    fn gold_letter_index_out_of_range_fails() {
        let mut s = mc_sample("q1");
        s.gold.letter_index = Some(3);
        let err =
            DatasetManifest::new("demo", DatasetFormat::MultipleChoice, None, vec![s]).unwrap_err();
        assert!(matches!(err, DatasetError::Validation { .. }));
    }

    #[test]
    fn open_sample_without_aliases_fails() {
        let mut s = open_sample("q1");
        s.gold.aliases.clear();
        let err = DatasetManifest::new("demo", DatasetFormat::OpenEnded, None, vec![s]).unwrap_err();
        assert!(matches!(err, DatasetError::Validation { .. }));
    }

    #[test]
    fn filter_subset_empty_subjects_yields_empty_manifest() {
        let mut s = mc_sample("q1");
        s.subject = Some("Biology".into());
        let manifest =
            DatasetManifest::new("demo", DatasetFormat::MultipleChoice, None, vec![s]).unwrap();
        let (filtered, counts) = filter_mmmu_subset(&manifest, &[]).unwrap();
        assert!(filtered.is_empty());
        assert!(counts.is_empty());
    }

    #[test]
    fn filter_subset_unknown_subject_errors() {
        let mut s = mc_sample("q1");
        s.subject = Some("Biology".into());
        let manifest =
            DatasetManifest::new("demo", DatasetFormat::MultipleChoice, None, vec![s]).unwrap();
        let err = filter_mmmu_subset(&manifest, &["Astrology".to_string()]).unwrap_err();
        match err {
            DatasetError::UnknownSubject(subject) => assert_eq!(subject, "Astrology"),
            other => panic!("expected UnknownSubject, got {other:?}"),
        }
    }

    #[test]
    fn filter_subset_drops_imageless_samples_and_is_idempotent() {
        let mut with_image = mc_sample("q1");
        with_image.subject = Some("Biology".into());
        let mut no_image = mc_sample("q2");
        no_image.subject = Some("Biology".into());
        no_image.image = None;
        let manifest = DatasetManifest::new(
            "demo",
            DatasetFormat::MultipleChoice,
            None,
            vec![with_image, no_image],
        )
        .unwrap();
        let subjects = vec!["Biology".to_string()];
        let (once, counts) = filter_mmmu_subset(&manifest, &subjects).unwrap();
        assert_eq!(once.len(), 1);
        assert_eq!(counts.get("Biology"), Some(&1));
        let (twice, _) = filter_mmmu_subset(&once, &subjects).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn stats_sum_to_manifest_length() {
        let manifest = DatasetManifest::new(
            "demo",
            DatasetFormat::MultipleChoice,
            None,
            vec![mc_sample("q1"), mc_sample("q2")],
        )
        .unwrap();
        let stats = dataset_stats(&manifest);
        assert_eq!(stats.total, 2);
        assert_eq!(stats.multiple_choice, 2);
        assert_eq!(stats.open_ended, 0);
    }

    #[test]
    fn empty_manifest_stats_all_zero() {
        let manifest =
            DatasetManifest::new("demo", DatasetFormat::OpenEnded, None, vec![]).unwrap();
        let stats = dataset_stats(&manifest);
        assert_eq!(stats.total, 0);
        assert_eq!(stats.with_image, 0);
        assert!(stats.by_subject.is_empty());
    }
}
