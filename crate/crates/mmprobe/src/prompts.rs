//! Frozen prompt templates.
//!
//! Every template here is byte-exact and covered by golden-file tests, so
//! changing any of them is a breaking change for cached runs: the cache key
//! of each request includes the rendered prompt.

/// Renders a multiple-choice question block:
///
/// ```text
/// Question: {Q}
/// Options:
/// (A) {o1}
/// (B) {o2}
/// ...
/// Answer:
/// ```
pub fn multiple_choice(question: &str, options: &[String]) -> String {
    let mut out = format!("Question: {question}\nOptions:\n");
    for (i, option) in options.iter().enumerate() {
        out.push('(');
        out.push(option_letter(i));
        out.push_str(") ");
        out.push_str(option);
        out.push('\n');
    }
    out.push_str("Answer:");
    out
}

/// Letter for a zero-based option index: 0 -> 'A', ..., 25 -> 'Z'.
///
/// Panics above 25; manifests cap options at 26.
pub fn option_letter(index: usize) -> char {
    assert!(index < 26, "option index {index} has no letter");
    (b'A' + index as u8) as char
}

/// Wraps a question with retrieved background paragraphs in rank order.
/// Each `(title, text)` pair renders as `[k] {title} — {text}`.
pub fn with_background(question_block: &str, paragraphs: &[(String, String)]) -> String {
    let mut out = format!("{question_block}\n\nBackground:\n");
    for (i, (title, text)) in paragraphs.iter().enumerate() {
        out.push_str(&format!("[{}] {} — {}\n", i + 1, title, text));
    }
    out.push_str("\nAnswer the question.");
    out
}

/// Yes/No grading prompt for multiple-choice predictions. The answer slot
/// takes the two-part gold string `({letter}) {option body}`.
pub fn judge(prediction: &str, answer: &str) -> String {
    format!(
        "You will get a prediction and an answer of the same question, please judge whether the prediction is correct or not.\n\
The answer is two parts, one part is an alphabet, one part is a sentence.\n\
If the prediction can match one part of the answer, then the prediction is correct.\n\
If the prediction can't match any part of the answer, then the prediction is wrong.\n\
Prediction:\n\
  {prediction}\n\
Answer:\n\
  {answer}\n\
Only output the result, no need to explain, result should be one word \"Yes\" or \"No\".\n\
Result:"
    )
}

/// Prompt that asks a strong text model to rewrite a visual question into a
/// self-contained textual question. The reply is expected to be a one-key
/// dict `{'question': '...'}`.
pub fn convert_question(visual_question: &str, options: &str, ground_truth: &str) -> String {
    format!(
        "You will receive a VQA question and its corresponding answer, as well as the options for the question.\n\
Now based on the provided information, you need to convert the given VQA problem into a textual question by adding image decription to the original question so that blind people can also answer it.\n\
When describing the image, you should focus on the key features and important details that are relevant to the question or help to solve the problem.\n\
\n\
Here is the VQA problem:\n\
Question:\n\
  {visual_question}\n\
Options:\n\
  {options}\n\
The Answer of this vqa problem is:\n\
  {ground_truth}\n\
\n\
Options should not be included in the question.\n\
Again, You are describing this VQA question to a blind person, ensuring not to overlook any visual details relevant to the question.\n\
Now, please convert the VQA problem into a textual question. You can think step by step.\n\
The result should be in a **dict** with key \"question\" and value as the textual question, output format should be:\n\
  {{'question': 'your output'}}"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mc_block_shape() {
        let prompt = multiple_choice("Pick one", &["x".into(), "y".into()]);
        assert_eq!(prompt, "Question: Pick one\nOptions:\n(A) x\n(B) y\nAnswer:");
    }

    #[test]
    fn letters_run_a_to_z() {
        assert_eq!(option_letter(0), 'A');
        assert_eq!(option_letter(25), 'Z');
    }

    #[test]
    fn background_lists_paragraphs_in_order() {
        let prompt = with_background(
            "Who built it?",
            &[
                ("Hall".into(), "A hall.".into()),
                ("Bridge".into(), "A bridge.".into()),
            ],
        );
        assert_eq!(
            prompt,
            "Who built it?\n\nBackground:\n[1] Hall — A hall.\n[2] Bridge — A bridge.\n\nAnswer the question."
        );
    }

    #[test]
    fn judge_prompt_embeds_both_slots() {
        let prompt = judge("some prediction", "(B) tundra");
        assert!(prompt.contains("Prediction:\n  some prediction\n"));
        assert!(prompt.contains("Answer:\n  (B) tundra\n"));
        assert!(prompt.ends_with("Result:"));
    }

    #[test]
    fn convert_prompt_keeps_dict_shape_hint() {
        let prompt = convert_question("Q", "(A) x", "x");
        assert!(prompt.ends_with("{'question': 'your output'}"));
    }
}
