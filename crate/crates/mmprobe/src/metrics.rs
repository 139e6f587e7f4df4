//! Every reported quantity: score rate, gap rate, sufficiency and necessity
//! ratios, retrieval-augmented score rates, recall@k and the random-guess
//! baseline.
//!
//! All rates are computed in double precision over immutable judgment sets;
//! rendering to one-decimal percentages happens only in the report layer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::dataset::{DatasetFormat, DatasetManifest};
use crate::judging::Judgment;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("judgment set is empty")]
    EmptySet,
    #[error("zero denominator: {0}")]
    ZeroDenominator(&'static str),
    #[error("judgment sets cover different samples (e.g. {example})")]
    SampleMismatch { example: String },
    #[error("duplicate sample id {0} in judgment set")]
    DuplicateSample(String),
    #[error("no sample carries gold provenance documents")]
    EmptyGold,
    #[error("manifest {0} is not multiple-choice")]
    NotMultipleChoice(String),
}

/// Per-sample correctness under one (dataset, model, condition) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentSet {
    pub dataset: String,
    pub model: String,
    pub condition: Condition,
    pub judgments: BTreeMap<String, bool>,
}

impl JudgmentSet {
    pub fn new(
        dataset: impl Into<String>,
        model: impl Into<String>,
        condition: Condition,
        judgments: BTreeMap<String, bool>,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            condition,
            judgments,
        }
    }

    pub fn from_judgments(
        dataset: impl Into<String>,
        model: impl Into<String>,
        condition: Condition,
        judgments: &[Judgment],
    ) -> Result<Self, MetricError> {
        let mut map = BTreeMap::new();
        for j in judgments {
            if map.insert(j.sample_id.clone(), j.correct).is_some() {
                return Err(MetricError::DuplicateSample(j.sample_id.clone()));
            }
        }
        Ok(Self::new(dataset, model, condition, map))
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    fn correct_count(&self) -> usize {
        self.judgments.values().filter(|&&c| c).count()
    }
}

/// Fraction of samples answered correctly.
pub fn score_rate(set: &JudgmentSet) -> Result<f64, MetricError> {
    if set.is_empty() {
        return Err(MetricError::EmptySet);
    }
    Ok(set.correct_count() as f64 / set.len() as f64)
}

/// `1 - SR_without_image / SR_with_image`. May be negative when the
/// image-absent score exceeds the image-present one.
pub fn gap_rate(sr_with_image: f64, sr_without_image: f64) -> Result<f64, MetricError> {
    if sr_with_image == 0.0 {
        return Err(MetricError::ZeroDenominator("SR with image is 0"));
    }
    Ok(1.0 - sr_without_image / sr_with_image)
}

fn check_same_coverage(a: &JudgmentSet, b: &JudgmentSet) -> Result<(), MetricError> {
    if a.judgments.len() != b.judgments.len()
        || a.judgments.keys().zip(b.judgments.keys()).any(|(x, y)| x != y)
    {
        let example = a
            .judgments
            .keys()
            .find(|k| !b.judgments.contains_key(*k))
            .or_else(|| b.judgments.keys().find(|k| !a.judgments.contains_key(*k)))
            .cloned()
            .unwrap_or_default();
        return Err(MetricError::SampleMismatch { example });
    }
    Ok(())
}

/// Among samples answered correctly as visual questions, the fraction also
/// answered correctly as knowledge questions.
pub fn sufficiency_ratio(
    visual: &JudgmentSet,
    knowledge: &JudgmentSet,
) -> Result<f64, MetricError> {
    check_same_coverage(visual, knowledge)?;
    let denominator = visual.correct_count();
    if denominator == 0 {
        return Err(MetricError::ZeroDenominator("no visually correct sample"));
    }
    let numerator = visual
        .judgments
        .iter()
        .filter(|(id, &v)| v && knowledge.judgments[*id])
        .count();
    Ok(numerator as f64 / denominator as f64)
}

/// Among samples answered incorrectly as visual questions, the fraction
/// also answered incorrectly as knowledge questions.
pub fn necessity_ratio(
    visual: &JudgmentSet,
    knowledge: &JudgmentSet,
) -> Result<f64, MetricError> {
    check_same_coverage(visual, knowledge)?;
    let denominator = visual.len() - visual.correct_count();
    if denominator == 0 {
        return Err(MetricError::ZeroDenominator("no visually incorrect sample"));
    }
    let numerator = visual
        .judgments
        .iter()
        .filter(|(id, &v)| !v && !knowledge.judgments[*id])
        .count();
    Ok(numerator as f64 / denominator as f64)
}

/// The four-cell contingency table behind SuR and NeR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointCounts {
    pub both_correct: usize,
    pub visual_only: usize,
    pub knowledge_only: usize,
    pub neither: usize,
}

impl JointCounts {
    pub fn total(&self) -> usize {
        self.both_correct + self.visual_only + self.knowledge_only + self.neither
    }
}

pub fn joint_counts(
    visual: &JudgmentSet,
    knowledge: &JudgmentSet,
) -> Result<JointCounts, MetricError> {
    check_same_coverage(visual, knowledge)?;
    let mut counts = JointCounts {
        both_correct: 0,
        visual_only: 0,
        knowledge_only: 0,
        neither: 0,
    };
    for (id, &v) in &visual.judgments {
        match (v, knowledge.judgments[id]) {
            (true, true) => counts.both_correct += 1,
            (true, false) => counts.visual_only += 1,
            (false, true) => counts.knowledge_only += 1,
            (false, false) => counts.neither += 1,
        }
    }
    Ok(counts)
}

/// Score rate of a retrieval-augmented condition. Same arithmetic as
/// [`score_rate`], but guarded so it is only applied to RAG cells.
pub fn sr_rag(set: &JudgmentSet) -> Result<(usize, f64), MetricError> {
    assert!(
        set.condition.rag_n > 0,
        "sr_rag requires a condition with rag_n > 0"
    );
    Ok((set.condition.rag_n, score_rate(set)?))
}

/// Recall result plus the sample accounting behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub rate: f64,
    /// Samples with gold provenance that entered the denominator.
    pub scored: usize,
    /// Samples excluded for lacking gold provenance.
    pub excluded: usize,
}

/// Fraction of samples whose top-k ranked documents intersect their gold
/// provenance set. Samples lacking provenance are excluded and counted.
pub fn recall_at_k(
    rankings: &BTreeMap<String, Vec<String>>,
    gold: &BTreeMap<String, BTreeSet<String>>,
    k: usize,
) -> Result<RecallAtK, MetricError> {
    assert!(k >= 1, "recall@k requires k >= 1");
    let mut scored = 0usize;
    let mut hits = 0usize;
    let mut excluded = 0usize;
    for (sample_id, ranked) in rankings {
        match gold.get(sample_id) {
            Some(docs) if !docs.is_empty() => {
                scored += 1;
                let top = &ranked[..k.min(ranked.len())];
                if top.iter().any(|d| docs.contains(d)) {
                    hits += 1;
                }
            }
            _ => excluded += 1,
        }
    }
    if scored == 0 {
        return Err(MetricError::EmptyGold);
    }
    Ok(RecallAtK {
        k,
        rate: hits as f64 / scored as f64,
        scored,
        excluded,
    })
}

/// Expected score of uniform random guessing over a multiple-choice
/// manifest: the mean of `1 / |options|`.
pub fn random_guess_baseline(manifest: &DatasetManifest) -> Result<f64, MetricError> {
    if manifest.format != DatasetFormat::MultipleChoice {
        return Err(MetricError::NotMultipleChoice(manifest.name.clone()));
    }
    if manifest.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let sum: f64 = manifest
        .samples
        .iter()
        .map(|s| 1.0 / s.options.as_ref().expect("validated manifest").len() as f64)
        .sum();
    Ok(sum / manifest.len() as f64)
}

/// Everything the report layer renders for one (model, dataset) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    /// Score rate per condition, keyed by the condition's canonical label.
    pub sr_by_condition: BTreeMap<String, f64>,
    /// Gap rate for the original question format, when both modalities ran.
    #[serde(default)]
    pub gr: Option<f64>,
    /// Gap rate per question format.
    #[serde(default)]
    pub gr_by_format: BTreeMap<String, f64>,
    #[serde(default)]
    pub sur: Option<f64>,
    #[serde(default)]
    pub ner: Option<f64>,
    #[serde(default)]
    pub joint: Option<JointCounts>,
    /// Retrieval-augmented score rate keyed by n.
    #[serde(default)]
    pub sr_rag: BTreeMap<usize, f64>,
    /// Retrieval recall keyed by k.
    #[serde(default)]
    pub recall_at: BTreeMap<usize, f64>,
    #[serde(default)]
    pub random_guess: Option<f64>,
    /// Denominator behind every reported rate, keyed like the rate.
    pub denominators: BTreeMap<String, usize>,
    /// Dispatch failures per condition; these count as incorrect in SR.
    #[serde(default)]
    pub failures_by_condition: BTreeMap<String, usize>,
}

/// Assembles a [`MetricReport`] from the judgment sets of one
/// (model, dataset) pair. Metrics whose inputs are missing (no
/// knowledge-query run, no retrieval) are simply left out.
pub fn compile_report(
    dataset: &str,
    model: &str,
    sets: &[JudgmentSet],
    manifest: Option<&DatasetManifest>,
    recall: &[RecallAtK],
    failures_by_condition: BTreeMap<String, usize>,
) -> MetricReport {
    let mut report = MetricReport {
        dataset: dataset.to_string(),
        model: model.to_string(),
        sr_by_condition: BTreeMap::new(),
        gr: None,
        gr_by_format: BTreeMap::new(),
        sur: None,
        ner: None,
        joint: None,
        sr_rag: BTreeMap::new(),
        recall_at: BTreeMap::new(),
        random_guess: None,
        denominators: BTreeMap::new(),
        failures_by_condition,
    };

    for set in sets {
        if let Ok(rate) = score_rate(set) {
            let key = set.condition.key();
            report.denominators.insert(format!("sr.{key}"), set.len());
            report.sr_by_condition.insert(key, rate);
        }
    }

    use crate::condition::{Modality, QuestionFormat};
    let find = |modality: Modality, format: QuestionFormat| {
        sets.iter().find(|s| {
            s.condition.modality == modality
                && s.condition.format == format
                && s.condition.rag_n == 0
        })
    };

    for format in [
        QuestionFormat::Original,
        QuestionFormat::Shuffled,
        QuestionFormat::OpenEnded,
    ] {
        let (Some(with), Some(without)) = (
            find(Modality::WithImage, format),
            find(Modality::WithoutImage, format),
        ) else {
            continue;
        };
        let (Ok(sr_with), Ok(sr_without)) = (score_rate(with), score_rate(without)) else {
            continue;
        };
        if let Ok(gr) = gap_rate(sr_with, sr_without) {
            report
                .denominators
                .insert(format!("gr.{format}"), with.len());
            report.gr_by_format.insert(format.to_string(), gr);
            if format == QuestionFormat::Original {
                report.gr = Some(gr);
            }
        }
    }

    if let (Some(visual), Some(knowledge)) = (
        find(Modality::WithImage, QuestionFormat::Original),
        find(Modality::KnowledgeQuery, QuestionFormat::Original),
    ) {
        if let Ok(counts) = joint_counts(visual, knowledge) {
            report.joint = Some(counts);
            if let Ok(sur) = sufficiency_ratio(visual, knowledge) {
                report
                    .denominators
                    .insert("sur".into(), counts.both_correct + counts.visual_only);
                report.sur = Some(sur);
            }
            if let Ok(ner) = necessity_ratio(visual, knowledge) {
                report
                    .denominators
                    .insert("ner".into(), counts.knowledge_only + counts.neither);
                report.ner = Some(ner);
            }
        }
    }

    for set in sets {
        if set.condition.rag_n > 0 && set.condition.modality == Modality::WithImage {
            if let Ok((n, rate)) = sr_rag(set) {
                report.denominators.insert(format!("sr_rag.{n}"), set.len());
                report.sr_rag.insert(n, rate);
            }
        }
    }

    for r in recall {
        report.denominators.insert(format!("recall.{}", r.k), r.scored);
        report.recall_at.insert(r.k, r.rate);
    }

    if let Some(manifest) = manifest {
        if let Ok(rate) = random_guess_baseline(manifest) {
            report.denominators.insert("random_guess".into(), manifest.len());
            report.random_guess = Some(rate);
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::Condition;

    fn set_of(values: &[(&str, bool)]) -> JudgmentSet {
        JudgmentSet::new(
            "d",
            "m",
            Condition::with_image(),
            values
                .iter()
                .map(|(id, c)| (id.to_string(), *c))
                .collect(),
        )
    }

    #[test]
    fn score_rate_basics() {
        let all_true = set_of(&[("1", true), ("2", true), ("3", true), ("4", true), ("5", true)]);
        assert_eq!(score_rate(&all_true).unwrap(), 1.0);

        let half = set_of(&[("1", true), ("2", false), ("3", false), ("4", true)]);
        assert_eq!(score_rate(&half).unwrap(), 0.5);

        let empty = set_of(&[]);
        assert!(matches!(score_rate(&empty), Err(MetricError::EmptySet)));
    }

    #[test]
    fn gap_rate_matches_reported_table_arithmetic() {
        assert_eq!(gap_rate(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(gap_rate(0.5, 0.0).unwrap(), 1.0);
        // Inverting SR 70.7 / GR 20.1 gives SR-without about 56.49.
        let gr = gap_rate(0.707, 0.5649).unwrap();
        assert!((gr - 0.2010).abs() < 5e-4, "gr = {gr}");
        assert!(matches!(
            gap_rate(0.0, 0.1),
            Err(MetricError::ZeroDenominator(_))
        ));
    }

    #[test]
    fn gap_rate_can_go_negative() {
        assert!(gap_rate(0.4, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn sufficiency_ratio_joint_table() {
        // visual correct {1,2,3}, knowledge correct {1,2,4} over ids 1-4.
        let visual = set_of(&[("1", true), ("2", true), ("3", true), ("4", false)]);
        let knowledge = set_of(&[("1", true), ("2", true), ("3", false), ("4", true)]);
        let sur = sufficiency_ratio(&visual, &knowledge).unwrap();
        assert_eq!(sur, 2.0 / 3.0);

        let all_knowledge = set_of(&[("1", true), ("2", true), ("3", true), ("4", true)]);
        assert_eq!(sufficiency_ratio(&visual, &all_knowledge).unwrap(), 1.0);

        let none_visual = set_of(&[("1", false), ("2", false), ("3", false), ("4", false)]);
        assert!(matches!(
            sufficiency_ratio(&none_visual, &knowledge),
            Err(MetricError::ZeroDenominator(_))
        ));
    }

    #[test]
    fn necessity_ratio_joint_table() {
        // visual wrong {4}, knowledge wrong {3}: no overlap, NeR = 0.
        let visual = set_of(&[("1", true), ("2", true), ("3", true), ("4", false)]);
        let knowledge = set_of(&[("1", true), ("2", true), ("3", false), ("4", true)]);
        assert_eq!(necessity_ratio(&visual, &knowledge).unwrap(), 0.0);

        let knowledge_all_wrong =
            set_of(&[("1", false), ("2", false), ("3", false), ("4", false)]);
        assert_eq!(necessity_ratio(&visual, &knowledge_all_wrong).unwrap(), 1.0);

        let visual_all_right = set_of(&[("1", true), ("2", true), ("3", true), ("4", true)]);
        assert!(matches!(
            necessity_ratio(&visual_all_right, &knowledge),
            Err(MetricError::ZeroDenominator(_))
        ));
    }

    #[test]
    fn coverage_mismatch_is_detected() {
        let a = set_of(&[("1", true), ("2", true)]);
        let b = set_of(&[("1", true), ("3", true)]);
        assert!(matches!(
            sufficiency_ratio(&a, &b),
            Err(MetricError::SampleMismatch { .. })
        ));
    }

    #[test]
    fn joint_counts_partition_the_set() {
        let visual = set_of(&[("1", true), ("2", true), ("3", false), ("4", false)]);
        let knowledge = set_of(&[("1", true), ("2", false), ("3", true), ("4", false)]);
        let counts = joint_counts(&visual, &knowledge).unwrap();
        assert_eq!(counts.both_correct, 1);
        assert_eq!(counts.visual_only, 1);
        assert_eq!(counts.knowledge_only, 1);
        assert_eq!(counts.neither, 1);
        assert_eq!(counts.total(), visual.len());
    }

    #[test]
    fn recall_planted_ranks() {
        // Ranks 1, 2 and 4 for the three samples' gold documents.
        let mut rankings = BTreeMap::new();
        let mut gold = BTreeMap::new();
        let corpus: Vec<String> = (0..10).map(|i| format!("doc{i}")).collect();
        for (sample, rank) in [("s1", 1usize), ("s2", 2), ("s3", 4)] {
            let mut ranked = corpus.clone();
            let gold_doc = format!("gold-{sample}");
            ranked.insert(rank - 1, gold_doc.clone());
            rankings.insert(sample.to_string(), ranked);
            gold.insert(sample.to_string(), BTreeSet::from([gold_doc]));
        }
        assert_eq!(recall_at_k(&rankings, &gold, 1).unwrap().rate, 1.0 / 3.0);
        assert_eq!(recall_at_k(&rankings, &gold, 3).unwrap().rate, 2.0 / 3.0);
        assert_eq!(recall_at_k(&rankings, &gold, 5).unwrap().rate, 1.0);
    }

    #[test]
    fn recall_counts_excluded_samples() {
        let mut rankings = BTreeMap::new();
        rankings.insert("a".to_string(), vec!["d1".to_string()]);
        rankings.insert("b".to_string(), vec!["d2".to_string()]);
        let mut gold = BTreeMap::new();
        gold.insert("a".to_string(), BTreeSet::from(["d1".to_string()]));
        let result = recall_at_k(&rankings, &gold, 1).unwrap();
        assert_eq!(result.rate, 1.0);
        assert_eq!(result.scored, 1);
        assert_eq!(result.excluded, 1);

        let no_gold: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        assert!(matches!(
            recall_at_k(&rankings, &no_gold, 1),
            Err(MetricError::EmptyGold)
        ));
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rankings = BTreeMap::new();
        let mut gold = BTreeMap::new();
        for i in 0..20 {
            let ranked: Vec<String> = (0..30).map(|j| format!("s{i}-d{j}")).collect();
            gold.insert(
                format!("s{i}"),
                BTreeSet::from([format!("s{i}-d{}", (i * 7) % 30)]),
            );
            rankings.insert(format!("s{i}"), ranked);
        }
        let mut last = 0.0;
        for k in 1..=30 {
            let rate = recall_at_k(&rankings, &gold, k).unwrap().rate;
            assert!(rate >= last);
            last = rate;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn random_guess_baseline_mixes_option_counts() {
        use crate::dataset::{DatasetFormat, GoldAnswer, Sample};
        let sample = |id: &str, n: usize| Sample {
            id: id.into(),
            dataset: "d".into(),
            image: None,
            question: "q".into(),
            options: Some((0..n).map(|i| format!("o{i}")).collect()),
            gold: GoldAnswer::choice(0, vec!["o0".into()]),
            knowledge_question: None,
            entity: None,
            gold_doc_ids: None,
            subject: None,
        };
        let four = DatasetManifest::new(
            "d",
            DatasetFormat::MultipleChoice,
            None,
            vec![sample("a", 4), sample("b", 4)],
        )
        .unwrap();
        assert_eq!(random_guess_baseline(&four).unwrap(), 0.25);

        let mixed = DatasetManifest::new(
            "d",
            DatasetFormat::MultipleChoice,
            None,
            vec![sample("a", 2), sample("b", 4)],
        )
        .unwrap();
        assert_eq!(random_guess_baseline(&mixed).unwrap(), 0.375);

        let open = DatasetManifest::new(
            "d",
            DatasetFormat::OpenEnded,
            None,
            vec![Sample {
                options: None,
                gold: GoldAnswer::open(vec!["x".into()]),
                ..sample("a", 2)
            }],
        )
        .unwrap();
        assert!(matches!(
            random_guess_baseline(&open),
            Err(MetricError::NotMultipleChoice(_))
        ));
    }

    #[test]
    fn score_rate_is_permutation_invariant() {
        // BTreeMap iteration order is canonical, but build the same set from
        // two insertion orders to make the intent explicit.
        let forward = set_of(&[("1", true), ("2", false), ("3", true)]);
        let backward = set_of(&[("3", true), ("2", false), ("1", true)]);
        assert_eq!(
            score_rate(&forward).unwrap(),
            score_rate(&backward).unwrap()
        );
    }
}
