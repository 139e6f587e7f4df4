//! Knowledge-question generation for samples that do not ship one.
//!
//! Source precedence: a manifest-provided knowledge question always wins;
//! next comes deterministic entity substitution; converting through a chat
//! model is the fallback of last resort.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use crate::condition::{substitute_entity, ENTITY_PLACEHOLDER};
use crate::dataset::Sample;
use crate::gateway::{ChatEndpoint, ChatRequest, GatewayError};
use crate::prompts;

#[derive(Debug, thiserror::Error)]
pub enum ConvertError {
    #[error("converter reply for sample {sample_id} carries no question mapping (after one retry): {reply:?}")]
    Parse { sample_id: String, reply: String },
    #[error("sample {0} has no gold alias or option body to show the converter")]
    MissingGold(String),
    #[error(transparent)]
    Endpoint(#[from] GatewayError),
}

/// Extracts the `question` value from a converter reply.
///
/// Tries, in order: strict JSON over the whole reply or its first `{...}`
/// block, a double-quoted regex capture, then the single-quoted dict shape
/// the prompt itself demonstrates.
pub fn parse_converted_reply(reply: &str) -> Option<String> {
    let trimmed = reply.trim();
    for candidate in [Some(trimmed), first_brace_block(trimmed)].into_iter().flatten() {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(candidate) {
            if let Some(question) = value.get("question").and_then(|q| q.as_str()) {
                return Some(question.to_string());
            }
        }
    }

    let double = regex::Regex::new(r#""question"\s*:\s*"((?:[^"\\]|\\.)*)""#).expect("static regex");
    if let Some(cap) = double.captures(trimmed) {
        let quoted = format!("\"{}\"", &cap[1]);
        if let Ok(unescaped) = serde_json::from_str::<String>(&quoted) {
            return Some(unescaped);
        }
    }

    let single = regex::Regex::new(r"'question'\s*:\s*'([^']*)'").expect("static regex");
    if let Some(cap) = single.captures(trimmed) {
        return Some(cap[1].to_string());
    }
    None
}

fn first_brace_block(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

/// Chat-model backed converter with a per-sample reply cache.
pub struct KnowledgeConverter {
    endpoint: Arc<dyn ChatEndpoint>,
    model: String,
    cache: RwLock<BTreeMap<String, String>>,
}

impl KnowledgeConverter {
    pub fn new(endpoint: Arc<dyn ChatEndpoint>, model: impl Into<String>) -> Self {
        Self {
            endpoint,
            model: model.into(),
            cache: RwLock::new(BTreeMap::new()),
        }
    }

    fn build_prompt(&self, sample: &Sample) -> Result<String, ConvertError> {
        let options_block = match &sample.options {
            Some(options) => options
                .iter()
                .enumerate()
                .map(|(i, o)| format!("({}) {o}", prompts::option_letter(i)))
                .collect::<Vec<_>>()
                .join("\n"),
            None => "None".to_string(),
        };
        let ground_truth = sample
            .gold_option_body()
            .map(str::to_string)
            .or_else(|| sample.gold.aliases.first().cloned())
            .ok_or_else(|| ConvertError::MissingGold(sample.id.clone()))?;
        Ok(prompts::convert_question(
            &sample.question,
            &options_block,
            &ground_truth,
        ))
    }

    /// Converts one sample's visual question into a textual knowledge
    /// question. Replies are cached by sample id; an unparseable reply is
    /// retried once with the identical prompt before failing.
    pub async fn convert(&self, sample: &Sample) -> Result<String, ConvertError> {
        if let Some(hit) = self.cache.read().expect("cache lock").get(&sample.id) {
            return Ok(hit.clone());
        }
        let prompt = self.build_prompt(sample)?;
        let req = ChatRequest::new(&self.model, prompt);

        let mut last_reply = String::new();
        for _ in 0..2 {
            let reply = self.endpoint.chat(&req).await?;
            if let Some(question) = parse_converted_reply(&reply) {
                self.cache
                    .write()
                    .expect("cache lock")
                    .insert(sample.id.clone(), question.clone());
                return Ok(question);
            }
            last_reply = reply;
        }
        Err(ConvertError::Parse {
            sample_id: sample.id.clone(),
            reply: last_reply,
        })
    }
}

/// Resolves a sample's knowledge question by precedence: manifest value,
/// then entity substitution, then LLM conversion. Returns `Ok(None)` when
/// no source applies and no converter is configured.
pub async fn knowledge_question_for(
    sample: &Sample,
    converter: Option<&KnowledgeConverter>,
) -> Result<Option<String>, ConvertError> {
    if let Some(k) = &sample.knowledge_question {
        return Ok(Some(k.clone()));
    }
    if sample.entity.is_some() && sample.question.contains(ENTITY_PLACEHOLDER) {
        if let Ok(k) = substitute_entity(sample) {
            return Ok(Some(k));
        }
    }
    match converter {
        Some(converter) => Ok(Some(converter.convert(sample).await?)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GoldAnswer;
    use crate::mock::{Behavior, MockChat, Script};

    #[test]
    fn strict_json_reply_parses() {
        assert_eq!(
            parse_converted_reply(r#"{"question": "Which venue hosted the final concert?"}"#),
            Some("Which venue hosted the final concert?".to_string())
        );
    }

    #[test]
    fn single_quoted_dict_parses() {
        assert_eq!(
            parse_converted_reply("{'question': 'X'}"),
            Some("X".to_string())
        );
    }

    #[test]
    fn json_embedded_in_prose_parses() {
        let reply = "Sure, here you go:\n{\"question\": \"What is shown?\"}\nHope that helps.";
        assert_eq!(parse_converted_reply(reply), Some("What is shown?".to_string()));
    }

    #[test]
    fn escaped_quotes_survive() {
        assert_eq!(
            parse_converted_reply(r#"{"question": "Name the \"last\" venue"}"#),
            Some(r#"Name the "last" venue"#.to_string())
        );
    }

    #[test]
    fn prose_without_mapping_fails() {
        assert_eq!(parse_converted_reply("I cannot convert this."), None);
    }

    fn sample() -> Sample {
        Sample {
            id: "s1".into(),
            dataset: "d".into(),
            image: Some("img.png".into()),
            question: "What biome is shown?".into(),
            options: Some(vec!["taiga".into(), "tundra".into()]),
            gold: GoldAnswer::choice(0, vec!["taiga".into()]),
            knowledge_question: None,
            entity: None,
            gold_doc_ids: None,
            subject: None,
        }
    }

    #[tokio::test]
    async fn convert_caches_by_sample_id() {
        let mock = Arc::new(MockChat::new(
            Script::new(Behavior::GoldAlways)
                .with_gold("What biome", r#"{"question": "Which biome has conifers?"}"#),
        ));
        let converter = KnowledgeConverter::new(mock.clone(), "gpt");
        let s = sample();
        assert_eq!(converter.convert(&s).await.unwrap(), "Which biome has conifers?");
        assert_eq!(converter.convert(&s).await.unwrap(), "Which biome has conifers?");
        assert_eq!(mock.calls(), 1);
    }

    #[tokio::test]
    async fn unparseable_reply_fails_after_one_retry() {
        let mock = Arc::new(MockChat::new(
            Script::new(Behavior::GoldAlways).with_gold("What biome", "free prose, no mapping"),
        ));
        let converter = KnowledgeConverter::new(mock.clone(), "gpt");
        let err = converter.convert(&sample()).await.unwrap_err();
        assert!(matches!(err, ConvertError::Parse { .. }));
        assert_eq!(mock.calls(), 2);
    }

    #[tokio::test]
    async fn precedence_prefers_manifest_then_entity() {
        let mut s = sample();
        s.knowledge_question = Some("From manifest".into());
        assert_eq!(
            knowledge_question_for(&s, None).await.unwrap(),
            Some("From manifest".to_string())
        );

        let mut s = sample();
        s.question = "Where is [ENT] located?".into();
        s.entity = Some("the Louvre".into());
        assert_eq!(
            knowledge_question_for(&s, None).await.unwrap(),
            Some("Where is the Louvre located?".to_string())
        );

        assert_eq!(knowledge_question_for(&sample(), None).await.unwrap(), None);
    }
}
