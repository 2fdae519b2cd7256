//! Prompt assembly from the bundled templates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AtomicTextMatrix, LlmError, Result};
use crate::decompose::FineGrainedDescription;

pub const SYSTEM_PROMPT: &str = include_str!("../../assets/prompts/v1/system.txt");
pub const INFERENCE_TEMPLATE: &str = include_str!("../../assets/prompts/v1/inference.txt");
pub const TRAINING_TEMPLATE: &str = include_str!("../../assets/prompts/v1/training.txt");

/// One demonstration: a raw text and its decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub output: AtomicTextMatrix,
}

/// A fully assembled request.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system: String,
    pub instructions: String,
    pub examples: Vec<Example>,
    pub query: String,
    pub periods_hint: Option<usize>,
    pub description: Option<FineGrainedDescription>,
}

impl PromptBundle {
    /// The user-turn text sent after the system prompt.
    pub fn user_message(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.instructions);
        if !out.ends_with('\n') {
            out.push('\n');
        }
        for (k, ex) in self.examples.iter().enumerate() {
            let _ = write!(
                out,
                "Example {}:\n<input>{}</input>\n<output>{}</output>\n",
                k + 1,
                ex.input,
                ex.output.to_json_pretty()
            );
        }
        match &self.description {
            Some(desc) => {
                let _ = writeln!(out, "<input>{}</input>", self.query);
                out.push_str(&render_description_blocks(desc));
                out.push_str("<output>");
            }
            None => {
                out.push_str("# Query #\n");
                if let Some(p) = self.periods_hint {
                    let _ = writeln!(out, "Split this motion into {p} stages if it allows.");
                }
                let _ = write!(out, "<input>{}</input>\n<output>", self.query);
            }
        }
        out
    }

    /// System prompt and user message joined; the fixture key is hashed from this.
    pub fn full_prompt(&self) -> String {
        format!("{}\n{}", self.system.trim_end(), self.user_message())
    }
}

fn clean_query(raw_text: &str) -> Result<String> {
    let q = raw_text.trim();
    if q.is_empty() {
        return Err(LlmError::EmptyInput);
    }
    Ok(q.to_string())
}

pub fn build_inference_prompt(raw_text: &str, examples: &[Example], periods_hint: Option<usize>) -> Result<PromptBundle> {
    let query = clean_query(raw_text)?;
    if examples.is_empty() {
        return Err(LlmError::NoExamples);
    }
    Ok(PromptBundle {
        system: SYSTEM_PROMPT.trim_end().to_string(),
        instructions: INFERENCE_TEMPLATE.to_string(),
        examples: examples.to_vec(),
        query,
        periods_hint,
        description: None,
    })
}

pub fn build_training_prompt(raw_text: &str, description: &FineGrainedDescription) -> Result<PromptBundle> {
    let query = clean_query(raw_text)?;
    if description.is_empty() {
        return Err(LlmError::EmptyDescription);
    }
    Ok(PromptBundle {
        system: SYSTEM_PROMPT.trim_end().to_string(),
        instructions: TRAINING_TEMPLATE.to_string(),
        examples: Vec::new(),
        query,
        periods_hint: Some(description.period_count()),
        description: Some(description.clone()),
    })
}

/// One block per period listing each body part's phrases in order.
pub fn render_description_blocks(desc: &FineGrainedDescription) -> String {
    let mut out = String::new();
    for p in 0..desc.period_count() {
        let _ = writeln!(out, "Period {p}:");
        for (part, entries) in desc.by_body_part(p) {
            let phrases: Vec<&str> = entries.iter().map(|e| e.phrase.as_str()).collect();
            let text = if phrases.is_empty() {
                "no measured movement".to_string()
            } else {
                phrases.join("; ")
            };
            let _ = writeln!(out, "  {}: {}", part.as_str(), text);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    const BODY_PART_LIST: &str =
        r#"["spine", "left_upper_limb", "right_upper_limb", "left_lower_limb", "right_lower_limb", "trajectory"]"#;

    fn sha(s: &str) -> String {
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    #[test]
    fn template_integrity() {
        assert_eq!(sha(SYSTEM_PROMPT), "5bbae64d52ead291da1b4ef08be2d9e0693e0423c3a828d2c0b9994abec27052");
        assert_eq!(sha(INFERENCE_TEMPLATE), "4beea5e28b345f327fd72ce2822f16ba526d780a94fe1082bed9388529c34a0d");
        assert_eq!(sha(TRAINING_TEMPLATE), "0b4278e367ce6e7724d6a67ccab824da49de0fa4c5a6212a4589618dd2cf5b6a");
    }

    fn example(tag: &str) -> Example {
        Example {
            input: format!("input {tag}"),
            output: AtomicTextMatrix::new(vec![crate::motion::BodyPart::ALL.map(|p| format!("{tag} {p}"))]).unwrap(),
        }
    }

    #[test]
    fn inference_prompt_lists_body_parts_once() {
        let b = build_inference_prompt("he stomps his left feet", &[example("a")], None).unwrap();
        assert_eq!(b.user_message().matches(BODY_PART_LIST).count(), 1);
        assert!(b.system.contains("kinesiology expert"));
        assert!(b.user_message().ends_with("<input>he stomps his left feet</input>\n<output>"));
    }

    #[test]
    fn inference_prompt_is_deterministic_and_ordered() {
        let examples: Vec<Example> = (0..15).map(|i| example(&format!("ex{i}"))).collect();
        let a = build_inference_prompt("jump", &examples, Some(3)).unwrap().full_prompt();
        let b = build_inference_prompt("jump", &examples, Some(3)).unwrap().full_prompt();
        assert_eq!(a, b);
        let mut last = 0;
        for k in 1..=15 {
            let pos = a.find(&format!("Example {k}:\n<input>input ex{}</input>", k - 1)).unwrap();
            assert!(pos >= last);
            last = pos;
        }
        assert_eq!(a.matches("Example ").count(), 15);
    }

    #[test]
    fn inference_prompt_errors() {
        assert_eq!(build_inference_prompt("  ", &[example("a")], None), Err(LlmError::EmptyInput));
        assert_eq!(build_inference_prompt("walk", &[], None), Err(LlmError::NoExamples));
    }
}
