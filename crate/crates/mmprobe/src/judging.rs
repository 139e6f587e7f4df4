//! Correctness decisions: rule-matching for open-ended answers, an LLM
//! judge for multiple-choice predictions.
//!
//! Rule matching checks whether any normalized gold alias appears as a
//! substring of the normalized response. Multiple-choice replies get graded
//! by a secondary model because option letters leak into chain-of-thought
//! text and defeat string rules.

use std::collections::BTreeMap;
use std::sync::Arc;

use futures::stream::StreamExt;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::condition::Condition;
use crate::dataset::{DatasetManifest, GoldAnswer, Sample};
use crate::gateway::{ChatEndpoint, ChatRequest, GatewayError, RunRecord};
use crate::prompts;

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("record references sample {0} which is not in the manifest")]
    MissingSample(String),
    #[error("batch contains multiple-choice trials but no judge is configured")]
    MissingJudge,
    #[error("judge reply is neither yes nor no after a retry: {reply:?}")]
    Parse { reply: String },
    #[error(transparent)]
    Endpoint(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMethod {
    RuleMatch,
    LlmJudge,
}

/// The correctness verdict for one (sample, condition) trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub sample_id: String,
    pub condition: Condition,
    pub correct: bool,
    pub method: JudgeMethod,
    #[serde(default)]
    pub matched_alias: Option<String>,
    #[serde(default)]
    pub judge_raw: Option<String>,
}

/// Normalization applied to both sides of a rule match: Unicode NFKC,
/// lowercase, drop everything except letters/digits/whitespace, collapse
/// runs of whitespace. Idempotent.
pub fn normalize(text: &str) -> String {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    let kept: String = folded
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Substring rule match of a response against gold aliases. The matched
/// alias is the first one in manifest order whose normalized form appears
/// in the normalized response.
pub fn rule_match(
    sample_id: &str,
    condition: &Condition,
    response: &str,
    gold: &GoldAnswer,
) -> Judgment {
    debug_assert!(!gold.aliases.is_empty(), "rule_match needs at least one alias");
    let haystack = normalize(response);
    let matched_alias = gold.aliases.iter().find_map(|alias| {
        let needle = normalize(alias);
        (!needle.is_empty() && haystack.contains(&needle)).then(|| alias.clone())
    });
    Judgment {
        sample_id: sample_id.to_string(),
        condition: *condition,
        correct: matched_alias.is_some(),
        method: JudgeMethod::RuleMatch,
        matched_alias,
        judge_raw: None,
    }
}

/// First maximal alphabetic run in the reply, compared case-insensitively
/// against yes/no. Real judges append punctuation, so whole-string equality
/// would be too brittle.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let token: String = reply
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    if token.eq_ignore_ascii_case("yes") {
        Some(true)
    } else if token.eq_ignore_ascii_case("no") {
        Some(false)
    } else {
        None
    }
}

/// A grading endpoint plus the model name to address it with.
pub struct Judge {
    endpoint: Arc<dyn ChatEndpoint>,
    model: String,
    concurrency: usize,
}

impl Judge {
    pub fn new(endpoint: Arc<dyn ChatEndpoint>, model: impl Into<String>) -> Self {
        Self {
            endpoint,
            model: model.into(),
            concurrency: 8,
        }
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        self.concurrency = concurrency.max(1);
        self
    }
}

/// Grades a multiple-choice prediction against the two-part gold answer
/// `({letter}) {text}`. Retries the identical prompt once if the reply is
/// not parseable as yes/no.
pub async fn llm_judge(
    sample_id: &str,
    condition: &Condition,
    prediction: &str,
    gold_letter: char,
    gold_text: &str,
    judge: &Judge,
) -> Result<Judgment, JudgeError> {
    debug_assert!(gold_letter.is_ascii_uppercase());
    debug_assert!(!gold_text.is_empty());
    let answer = format!("({gold_letter}) {gold_text}");
    let prompt = prompts::judge(prediction, &answer);
    let req = ChatRequest::new(&judge.model, prompt);

    let mut last_reply = String::new();
    for _ in 0..2 {
        let reply = judge.endpoint.chat(&req).await?;
        if let Some(correct) = parse_yes_no(&reply) {
            return Ok(Judgment {
                sample_id: sample_id.to_string(),
                condition: *condition,
                correct,
                method: JudgeMethod::LlmJudge,
                matched_alias: None,
                judge_raw: Some(reply),
            });
        }
        last_reply = reply;
    }
    Err(JudgeError::Parse { reply: last_reply })
}

fn needs_llm_judge(record: &RunRecord) -> bool {
    record.succeeded() && record.trial.effective_gold.letter_index.is_some()
}

/// Grades a batch of run records, order-aligned with the input.
///
/// Routing: trials whose effective gold carries an option letter (original
/// and shuffled multiple choice, knowledge queries over multiple-choice
/// datasets) go to the LLM judge; everything else goes to rule matching.
/// Records that failed at dispatch are marked incorrect without consulting
/// the judge.
pub async fn judge_batch(
    records: &[RunRecord],
    manifest: &DatasetManifest,
    judge: Option<&Judge>,
) -> Result<Vec<Judgment>, JudgeError> {
    let by_id: BTreeMap<&str, &Sample> = manifest
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s))
        .collect();
    for record in records {
        if !by_id.contains_key(record.sample_id()) {
            return Err(JudgeError::MissingSample(record.sample_id().to_string()));
        }
    }
    if judge.is_none() && records.iter().any(needs_llm_judge) {
        return Err(JudgeError::MissingJudge);
    }

    let concurrency = judge.map(|j| j.concurrency).unwrap_or(1);
    futures::stream::iter(records.iter())
        .map(|record| {
            let sample = by_id[record.sample_id()];
            async move { judge_record(record, sample, judge).await }
        })
        .buffered(concurrency)
        .collect::<Vec<Result<Judgment, JudgeError>>>()
        .await
        .into_iter()
        .collect()
}

async fn judge_record(
    record: &RunRecord,
    sample: &Sample,
    judge: Option<&Judge>,
) -> Result<Judgment, JudgeError> {
    let condition = &record.trial.condition;
    let gold = &record.trial.effective_gold;

    let Some(response) = record.response_text.as_deref() else {
        // Failed generations count as incorrect; the failure itself is
        // tallied separately in the metric report.
        return Ok(Judgment {
            sample_id: record.sample_id().to_string(),
            condition: *condition,
            correct: false,
            method: JudgeMethod::RuleMatch,
            matched_alias: None,
            judge_raw: None,
        });
    };

    match gold.letter_index {
        Some(index) => {
            let judge = judge.ok_or(JudgeError::MissingJudge)?;
            let letter = prompts::option_letter(index);
            // The option body is permutation-invariant: look it up from the
            // sample's original gold slot.
            let body = sample
                .gold_option_body()
                .expect("letter-indexed gold implies a multiple-choice sample");
            llm_judge(record.sample_id(), condition, response, letter, body, judge).await
        }
        None => Ok(rule_match(record.sample_id(), condition, response, gold)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::Condition;

    fn open_condition() -> Condition {
        Condition::without_image()
    }

    #[test]
    fn candlestick_park_matches_inside_sentence() {
        let gold = GoldAnswer::open(vec!["Candlestick Park".into()]);
        let judgment = rule_match(
            "q",
            &open_condition(),
            "The venue was Candlestick Park in San Francisco.",
            &gold,
        );
        assert!(judgment.correct);
        assert_eq!(judgment.matched_alias.as_deref(), Some("Candlestick Park"));
    }

    #[test]
    fn normalization_absorbs_case_spacing_punctuation() {
        let gold = GoldAnswer::open(vec!["Candlestick Park".into()]);
        assert!(rule_match("q", &open_condition(), "candlestick   PARK!", &gold).correct);
    }

    #[test]
    fn wrong_answer_does_not_match() {
        let gold = GoldAnswer::open(vec!["Candlestick Park".into()]);
        let judgment = rule_match("q", &open_condition(), "Shea Stadium", &gold);
        assert!(!judgment.correct);
        assert_eq!(judgment.matched_alias, None);
    }

    #[test]
    fn first_alias_in_manifest_order_wins() {
        let gold = GoldAnswer::open(vec!["park".into(), "candlestick park".into()]);
        let judgment = rule_match("q", &open_condition(), "Candlestick Park", &gold);
        assert_eq!(judgment.matched_alias.as_deref(), Some("park"));
    }

    #[test]
    fn normalize_is_idempotent() {
        for text in ["Ｆｕｌｌ—ｗｉｄｔｈ,  text!", "  mixed   CASE  ", "naïve café"] {
            let once = normalize(text);
            assert_eq!(normalize(&once), once);
        }
    }

    #[test]
    fn rule_match_stable_under_prenormalized_response() {
        let gold = GoldAnswer::open(vec!["Rain Forest".into()]);
        let raw = "It's the RAIN-forest!";
        let direct = rule_match("q", &open_condition(), raw, &gold);
        let pre = rule_match("q", &open_condition(), &normalize(raw), &gold);
        assert_eq!(direct.correct, pre.correct);
    }

    #[test]
    fn adding_aliases_never_unmatches() {
        let narrow = GoldAnswer::open(vec!["taiga".into()]);
        let wide = GoldAnswer::open(vec!["taiga".into(), "boreal forest".into()]);
        let response = "I believe this is taiga.";
        let before = rule_match("q", &open_condition(), response, &narrow);
        let after = rule_match("q", &open_condition(), response, &wide);
        assert!(before.correct);
        assert!(after.correct);
    }

    #[test]
    fn yes_no_parsing_is_token_based() {
        assert_eq!(parse_yes_no("Yes"), Some(true));
        assert_eq!(parse_yes_no("no."), Some(false));
        assert_eq!(parse_yes_no("  \"YES\"!"), Some(true));
        assert_eq!(parse_yes_no("It depends"), None);
        assert_eq!(parse_yes_no("yesterday"), None);
        assert_eq!(parse_yes_no(""), None);
    }
}
