//! Builds every evaluation condition as a fully rendered trial.
//!
//! A condition is which inputs the model sees: the image-present question,
//! the same question without the image, or the text-only knowledge question,
//! crossed with a question format (original options, shuffled options, or
//! open-ended) and an optional number of retrieved background paragraphs.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{GoldAnswer, Sample};
use crate::prompts;
use crate::retrieval::Paragraph;

/// Literal token in manifest questions that stands for the image-referenced
/// entity. Replaced by the sample's `entity` to build a knowledge question.
pub const ENTITY_PLACEHOLDER: &str = "[ENT]";

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("sample {0} carries no knowledge_question")]
    MissingKnowledgeQuestion(String),
    #[error("incompatible condition for sample {sample_id}: {message}")]
    IncompatibleFormat { sample_id: String, message: String },
    #[error("sample {sample_id}: condition requests rag_n={expected} but {got} paragraphs were supplied")]
    RetrievalArity {
        sample_id: String,
        expected: usize,
        got: usize,
    },
    #[error("sample {0} is not multiple-choice")]
    NotMultipleChoice(String),
    #[error("sample {0} carries no entity")]
    MissingEntity(String),
    #[error("question of sample {0} contains no {ENTITY_PLACEHOLDER} placeholder")]
    NoPlaceholder(String),
}

/// Which inputs are presented to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    WithImage,
    WithoutImage,
    KnowledgeQuery,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::WithImage => write!(f, "with_image"),
            Modality::WithoutImage => write!(f, "without_image"),
            Modality::KnowledgeQuery => write!(f, "knowledge_query"),
        }
    }
}

/// How a multiple-choice question is presented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFormat {
    Original,
    Shuffled,
    OpenEnded,
}

impl fmt::Display for QuestionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuestionFormat::Original => write!(f, "original"),
            QuestionFormat::Shuffled => write!(f, "shuffled"),
            QuestionFormat::OpenEnded => write!(f, "open_ended"),
        }
    }
}

/// One evaluation condition. `rag_n == 0` means no retrieval augmentation.
/// `shuffle_seed` is the run-level seed; the per-sample permutation seed is
/// derived from it and the sample id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub modality: Modality,
    pub format: QuestionFormat,
    #[serde(default)]
    pub rag_n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

impl Condition {
    pub fn new(modality: Modality, format: QuestionFormat) -> Self {
        Self {
            modality,
            format,
            rag_n: 0,
            shuffle_seed: None,
        }
    }

    pub fn with_image() -> Self {
        Self::new(Modality::WithImage, QuestionFormat::Original)
    }

    pub fn without_image() -> Self {
        Self::new(Modality::WithoutImage, QuestionFormat::Original)
    }

    pub fn knowledge_query() -> Self {
        Self::new(Modality::KnowledgeQuery, QuestionFormat::Original)
    }

    pub fn shuffled(mut self, seed: u64) -> Self {
        self.format = QuestionFormat::Shuffled;
        self.shuffle_seed = Some(seed);
        self
    }

    pub fn open_ended(mut self) -> Self {
        self.format = QuestionFormat::OpenEnded;
        self
    }

    pub fn with_rag(mut self, n: usize) -> Self {
        self.rag_n = n;
        self
    }

    /// Canonical label used as a map key, in file names and in reports,
    /// e.g. `without_image.shuffled.seed7` or `with_image.original.rag3`.
    pub fn key(&self) -> String {
        let mut key = format!("{}.{}", self.modality, self.format);
        if let Some(seed) = self.shuffle_seed {
            key.push_str(&format!(".seed{seed}"));
        }
        if self.rag_n > 0 {
            key.push_str(&format!(".rag{}", self.rag_n));
        }
        key
    }

    fn validate_for(&self, sample: &Sample) -> Result<(), RenderError> {
        let incompatible = |message: &str| RenderError::IncompatibleFormat {
            sample_id: sample.id.clone(),
            message: message.into(),
        };
        if self.modality == Modality::KnowledgeQuery {
            if self.format != QuestionFormat::Original {
                return Err(incompatible(
                    "knowledge_query trials only use the original format",
                ));
            }
            if sample.knowledge_question.is_none() {
                return Err(RenderError::MissingKnowledgeQuestion(sample.id.clone()));
            }
        }
        match self.format {
            QuestionFormat::Original => {}
            QuestionFormat::Shuffled | QuestionFormat::OpenEnded => {
                if !sample.is_multiple_choice() {
                    return Err(incompatible(&format!(
                        "{} format requires a multiple-choice sample",
                        self.format
                    )));
                }
                if self.format == QuestionFormat::Shuffled && self.shuffle_seed.is_none() {
                    return Err(incompatible("shuffled format requires a shuffle_seed"));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// A fully rendered model input plus the bookkeeping needed to judge it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedTrial {
    pub sample_id: String,
    pub condition: Condition,
    pub prompt_text: String,
    pub image_attached: bool,
    /// Image path or URL, carried along so the gateway can attach it.
    #[serde(default)]
    pub image_ref: Option<String>,
    /// `permutation[new_position] = original_index`, present for shuffled trials.
    #[serde(default)]
    pub option_permutation: Option<Vec<usize>>,
    /// Gold answer after shuffling remap or option removal.
    pub effective_gold: GoldAnswer,
    #[serde(default)]
    pub retrieved_paragraph_ids: Vec<String>,
}

/// Derives the per-sample shuffle seed from the run seed and the sample id.
/// Stable across processes and platforms.
pub fn per_sample_seed(run_seed: u64, sample_id: &str) -> u64 {
    let digest = Sha256::digest(sample_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes) ^ run_seed
}

/// Draws a uniform pseudo-random permutation of `options` from a seeded
/// generator. Returns the permuted options, the new gold index, and the
/// permutation (`permutation[new_position] = original_index`). The identity
/// permutation is a legitimate outcome.
pub fn shuffle_options(
    options: &[String],
    gold_index: usize,
    seed: u64,
) -> (Vec<String>, usize, Vec<usize>) {
    assert!(options.len() >= 2, "need at least two options to shuffle");
    assert!(gold_index < options.len(), "gold index out of range");
    let mut permutation: Vec<usize> = (0..options.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    permutation.shuffle(&mut rng);
    let permuted: Vec<String> = permutation.iter().map(|&i| options[i].clone()).collect();
    let new_gold = permutation
        .iter()
        .position(|&i| i == gold_index)
        .expect("gold index present in permutation");
    (permuted, new_gold, permutation)
}

/// Rewrites a multiple-choice sample as an open-ended one: options removed,
/// the gold option body added to the alias set, question text unchanged.
pub fn to_open_ended(sample: &Sample) -> Result<Sample, RenderError> {
    let body = sample
        .gold_option_body()
        .ok_or_else(|| RenderError::NotMultipleChoice(sample.id.clone()))?
        .to_string();
    let mut open = sample.clone();
    open.options = None;
    open.gold.letter_index = None;
    if !open.gold.aliases.contains(&body) {
        open.gold.aliases.push(body);
    }
    Ok(open)
}

/// Replaces every `[ENT]` placeholder in the question with the sample's
/// entity, yielding a knowledge question.
pub fn substitute_entity(sample: &Sample) -> Result<String, RenderError> {
    let entity = sample
        .entity
        .as_deref()
        .ok_or_else(|| RenderError::MissingEntity(sample.id.clone()))?;
    if !sample.question.contains(ENTITY_PLACEHOLDER) {
        return Err(RenderError::NoPlaceholder(sample.id.clone()));
    }
    Ok(sample.question.replace(ENTITY_PLACEHOLDER, entity))
}

/// Renders a sample under a condition into the exact model input.
///
/// Pure: identical `(sample, condition, retrieved)` always yield a
/// byte-identical trial. `retrieved` must hold exactly `condition.rag_n`
/// paragraphs, already in descending retrieval-score order.
pub fn render(
    sample: &Sample,
    condition: &Condition,
    retrieved: Option<&[Paragraph]>,
) -> Result<RenderedTrial, RenderError> {
    condition.validate_for(sample)?;
    let supplied = retrieved.map(<[Paragraph]>::len).unwrap_or(0);
    if supplied != condition.rag_n {
        return Err(RenderError::RetrievalArity {
            sample_id: sample.id.clone(),
            expected: condition.rag_n,
            got: supplied,
        });
    }

    let mut option_permutation = None;
    let (question_block, effective_gold) = match condition.modality {
        Modality::KnowledgeQuery => {
            // Knowledge questions are always posed open-style, without options.
            let text = sample
                .knowledge_question
                .clone()
                .expect("validated above");
            (text, sample.gold.clone())
        }
        Modality::WithImage | Modality::WithoutImage => match condition.format {
            QuestionFormat::Original => match &sample.options {
                Some(options) => (
                    prompts::multiple_choice(&sample.question, options),
                    sample.gold.clone(),
                ),
                None => (sample.question.clone(), sample.gold.clone()),
            },
            QuestionFormat::Shuffled => {
                let options = sample.options.as_ref().expect("validated above");
                let gold_index = sample.gold.letter_index.expect("validated by manifest");
                let seed = per_sample_seed(
                    condition.shuffle_seed.expect("validated above"),
                    &sample.id,
                );
                let (permuted, new_gold, permutation) =
                    shuffle_options(options, gold_index, seed);
                option_permutation = Some(permutation);
                let gold = GoldAnswer {
                    aliases: sample.gold.aliases.clone(),
                    letter_index: Some(new_gold),
                };
                (prompts::multiple_choice(&sample.question, &permuted), gold)
            }
            QuestionFormat::OpenEnded => {
                let open = to_open_ended(sample)?;
                (sample.question.clone(), open.gold)
            }
        },
    };

    let prompt_text = if condition.rag_n > 0 {
        let paragraphs: Vec<(String, String)> = retrieved
            .unwrap_or_default()
            .iter()
            .map(|p| (p.title.clone(), p.text.clone()))
            .collect();
        prompts::with_background(&question_block, &paragraphs)
    } else {
        question_block
    };

    let image_attached = condition.modality == Modality::WithImage;
    Ok(RenderedTrial {
        sample_id: sample.id.clone(),
        condition: *condition,
        prompt_text,
        image_attached,
        image_ref: if image_attached {
            sample.image.clone()
        } else {
            None
        },
        option_permutation,
        effective_gold,
        retrieved_paragraph_ids: retrieved
            .unwrap_or_default()
            .iter()
            .map(|p| p.doc_id.clone())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GoldAnswer;

    fn biome_sample() -> Sample {
        Sample {
            id: "mmmu-biome".into(),
            dataset: "mmmu".into(),
            image: Some("images/biome.png".into()),
            question: "Identify the biome shown in **IMAGE**".into(),
            options: Some(vec![
                "taiga".into(),
                "tundra".into(),
                "rain forest".into(),
                "desert".into(),
            ]),
            gold: GoldAnswer::choice(0, vec!["taiga".into()]),
            knowledge_question: Some("Which biome is dominated by coniferous forest?".into()),
            entity: None,
            gold_doc_ids: None,
            subject: Some("Biology".into()),
        }
    }

    fn open_sample() -> Sample {
        Sample {
            id: "viq-1".into(),
            dataset: "viquae".into(),
            image: Some("images/hall.png".into()),
            question: "When was [ENT] built?".into(),
            options: None,
            gold: GoldAnswer::open(vec!["1097".into()]),
            knowledge_question: Some("When was Westminster Hall built?".into()),
            entity: Some("Westminster Hall".into()),
            gold_doc_ids: None,
            subject: None,
        }
    }

    #[test]
    fn mc_prompt_matches_template() {
        let trial = render(&biome_sample(), &Condition::with_image(), None).unwrap();
        assert_eq!(
            trial.prompt_text,
            "Question: Identify the biome shown in **IMAGE**\nOptions:\n(A) taiga\n(B) tundra\n(C) rain forest\n(D) desert\nAnswer:"
        );
        assert!(trial.image_attached);
        assert_eq!(trial.image_ref.as_deref(), Some("images/biome.png"));
    }

    #[test]
    fn image_ablation_only_flips_attachment() {
        let sample = biome_sample();
        let with = render(&sample, &Condition::with_image(), None).unwrap();
        let without = render(&sample, &Condition::without_image(), None).unwrap();
        assert_eq!(with.prompt_text, without.prompt_text);
        assert!(!without.image_attached);
        assert!(without.image_ref.is_none());
    }

    #[test]
    fn render_is_deterministic() {
        let sample = biome_sample();
        let condition = Condition::with_image().shuffled(99);
        let a = render(&sample, &condition, None).unwrap();
        let b = render(&sample, &condition, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_bookkeeping_matches_worked_example() {
        // Permutation [2,0,3,1] applied to [a,b,c,d] with gold 2 must give
        // [c,a,d,b] with new gold 0; reproduce it by searching for a seed
        // that draws that permutation, then checking the bookkeeping.
        let options: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        for seed in 0..4096u64 {
            let (permuted, new_gold, permutation) = shuffle_options(&options, 2, seed);
            if permutation == [2, 0, 3, 1] {
                assert_eq!(permuted, ["c", "a", "d", "b"]);
                assert_eq!(new_gold, 0);
                return;
            }
            assert_eq!(permuted[new_gold], "c");
        }
        panic!("no seed in 0..4096 produced permutation [2,0,3,1]");
    }

    #[test]
    fn shuffle_preserves_option_multiset_and_gold_body() {
        let options: Vec<String> = ["p", "q", "r"].iter().map(|s| s.to_string()).collect();
        for seed in 0..200 {
            let (permuted, new_gold, _) = shuffle_options(&options, 1, seed);
            let mut sorted = permuted.clone();
            sorted.sort();
            assert_eq!(sorted, ["p", "q", "r"]);
            assert_eq!(permuted[new_gold], "q");
        }
    }

    #[test]
    fn shuffle_same_seed_twice_is_identical() {
        let options: Vec<String> = ["p", "q", "r", "s"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            shuffle_options(&options, 3, 17),
            shuffle_options(&options, 3, 17)
        );
    }

    #[test]
    fn open_ended_render_drops_options_and_keeps_gold_body() {
        let trial = render(
            &biome_sample(),
            &Condition::with_image().open_ended(),
            None,
        )
        .unwrap();
        assert_eq!(trial.prompt_text, "Identify the biome shown in **IMAGE**");
        assert_eq!(trial.effective_gold.letter_index, None);
        assert!(trial.effective_gold.aliases.contains(&"taiga".to_string()));
    }

    #[test]
    fn to_open_ended_twice_errors() {
        let once = to_open_ended(&biome_sample()).unwrap();
        assert!(matches!(
            to_open_ended(&once),
            Err(RenderError::NotMultipleChoice(_))
        ));
    }

    #[test]
    fn knowledge_query_uses_k_text() {
        let trial = render(&open_sample(), &Condition::knowledge_query(), None).unwrap();
        assert_eq!(trial.prompt_text, "When was Westminster Hall built?");
        assert!(!trial.image_attached);
    }

    #[test]
    fn knowledge_query_without_k_errors() {
        let mut sample = open_sample();
        sample.knowledge_question = None;
        assert!(matches!(
            render(&sample, &Condition::knowledge_query(), None),
            Err(RenderError::MissingKnowledgeQuestion(_))
        ));
    }

    #[test]
    fn shuffled_format_on_open_sample_errors() {
        let condition = Condition::without_image().shuffled(1);
        assert!(matches!(
            render(&open_sample(), &condition, None),
            Err(RenderError::IncompatibleFormat { .. })
        ));
    }

    #[test]
    fn entity_substitution_replaces_every_placeholder() {
        let sample = open_sample();
        assert_eq!(
            substitute_entity(&sample).unwrap(),
            "When was Westminster Hall built?"
        );

        let mut doubled = sample.clone();
        doubled.question = "Is [ENT] older than [ENT]?".into();
        assert_eq!(
            substitute_entity(&doubled).unwrap(),
            "Is Westminster Hall older than Westminster Hall?"
        );
    }

    #[test]
    fn entity_substitution_error_paths() {
        let mut no_entity = open_sample();
        no_entity.entity = None;
        assert!(matches!(
            substitute_entity(&no_entity),
            Err(RenderError::MissingEntity(_))
        ));

        let mut no_placeholder = open_sample();
        no_placeholder.question = "When was it built?".into();
        assert!(matches!(
            substitute_entity(&no_placeholder),
            Err(RenderError::NoPlaceholder(_))
        ));
    }

    #[test]
    fn rag_render_appends_paragraphs_in_rank_order() {
        let sample = open_sample();
        let paragraphs = vec![
            Paragraph::new("d1", "Westminster Hall", "Built in 1097."),
            Paragraph::new("d2", "Westminster Abbey", "A church."),
        ];
        let condition = Condition::with_image().with_rag(2);
        let trial = render(&sample, &condition, Some(&paragraphs)).unwrap();
        assert_eq!(
            trial.prompt_text,
            "When was [ENT] built?\n\nBackground:\n[1] Westminster Hall — Built in 1097.\n[2] Westminster Abbey — A church.\n\nAnswer the question."
        );
        assert_eq!(trial.retrieved_paragraph_ids, ["d1", "d2"]);
    }

    #[test]
    fn rag_arity_mismatch_errors() {
        let sample = open_sample();
        let paragraphs = vec![Paragraph::new("d1", "t", "x")];
        let condition = Condition::with_image().with_rag(2);
        assert!(matches!(
            render(&sample, &condition, Some(&paragraphs)),
            Err(RenderError::RetrievalArity { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn condition_keys_are_distinct_and_stable() {
        assert_eq!(Condition::with_image().key(), "with_image.original");
        assert_eq!(
            Condition::without_image().shuffled(7).key(),
            "without_image.shuffled.seed7"
        );
        assert_eq!(
            Condition::with_image().with_rag(3).key(),
            "with_image.original.rag3"
        );
    }
}
