//! Prompt construction for the two evaluation regimes and parsing of
//! completions into think/answer segments.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::Vocab;
use crate::synvqa::{serialize_scene, VqaSample};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const QUESTION_MARK: &str = "<q>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Instruction appended in prompting mode, demanding the tagged output format.
pub const FORMAT_INSTRUCTION: [&str; 6] =
    ["respond", "with", THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Plain,
    Prompting,
}

/// `<bos> scene <q> question [instruction]` as token words.
pub fn build_prompt(sample: &VqaSample, mode: PromptMode, budget: usize) -> Result<Vec<String>> {
    let mut toks = vec![BOS.to_string()];
    toks.extend(serialize_scene(&sample.scene, budget)?);
    toks.push(QUESTION_MARK.to_string());
    toks.extend(sample.question.split_whitespace().map(str::to_string));
    if mode == PromptMode::Prompting {
        toks.extend(FORMAT_INSTRUCTION.iter().map(|t| t.to_string()));
    }
    if toks.len() > budget {
        return Err(crate::Error::Encoding(format!(
            "prompt of {} tokens exceeds budget {budget}",
            toks.len()
        )));
    }
    Ok(toks)
}

/// Gold completion words: `<think> reasoning </think> <answer> answer </answer> <eos>`.
pub fn target_words(sample: &VqaSample) -> Vec<String> {
    let mut t = vec![THINK_OPEN.to_string()];
    t.extend(sample.gold_reasoning.split_whitespace().map(str::to_string));
    t.push(THINK_CLOSE.to_string());
    t.push(ANSWER_OPEN.to_string());
    t.extend(sample.gold_answer.split_whitespace().map(str::to_string));
    t.push(ANSWER_CLOSE.to_string());
    t.push(EOS.to_string());
    t
}

/// Renders completion words as text. Words are space separated except next to
/// tag delimiters; `<eos>` ends the text.
pub fn detokenize<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut prev_tag = true;
    for w in words {
        let w = w.as_ref();
        if w == EOS {
            break;
        }
        let is_tag = TAGS.contains(&w);
        if !out.is_empty() && !is_tag && !prev_tag {
            out.push(' ');
        }
        out.push_str(w);
        prev_tag = is_tag;
    }
    out
}

/// Token ids of a sample's prompt and gold completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

/// Encodes prompt and target; together they must fit in `context` tokens.
pub fn encode_sample(sample: &VqaSample, mode: PromptMode, vocab: &Vocab, context: usize) -> Result<EncodedSample> {
    let prompt = vocab.encode(&build_prompt(sample, mode, context)?)?;
    let target = vocab.encode(&target_words(sample))?;
    if prompt.len() + target.len() > context {
        return Err(crate::Error::Encoding(format!(
            "{}: prompt + target of {} tokens exceeds context {context}",
            sample.id,
            prompt.len() + target.len()
        )));
    }
    Ok(EncodedSample { prompt, target })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub raw: String,
    pub think: Option<String>,
    pub answer: Option<String>,
    pub well_formed: bool,
}

/// Byte span of the first `open ... close` segment, if it is well nested:
/// the first `open` must be followed by a `close` with no delimiter in between.
fn first_segment(raw: &str, open: &str, close: &str) -> Option<(usize, usize, usize, usize)> {
    let start = raw.find(open)?;
    let inner_start = start + open.len();
    let inner_len = raw[inner_start..].find(close)?;
    let inner_end = inner_start + inner_len;
    let inner = &raw[inner_start..inner_end];
    if TAGS.iter().any(|t| inner.contains(t)) {
        return None;
    }
    Some((start, inner_start, inner_end, inner_end + close.len()))
}

/// Extracts the first think and answer segments. Total on any input.
///
/// `well_formed` requires both segments, with the think segment closed
/// before the answer segment opens.
pub fn parse_structured(raw: &str) -> StructuredResponse {
    let think = first_segment(raw, THINK_OPEN, THINK_CLOSE);
    let answer = first_segment(raw, ANSWER_OPEN, ANSWER_CLOSE);
    let well_formed = match (think, answer) {
        (Some((_, _, _, think_end)), Some((answer_start, _, _, _))) => think_end <= answer_start,
        _ => false,
    };
    StructuredResponse {
        raw: raw.to_string(),
        think: think.map(|(_, a, b, _)| raw[a..b].to_string()),
        answer: answer.map(|(_, a, b, _)| raw[a..b].to_string()),
        well_formed,
    }
}

/// Lowercases, collapses whitespace runs, and strips trailing periods.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    loop {
        let trimmed = s.trim_end_matches('.').trim_end();
        if trimmed.len() == s.len() {
            return s;
        }
        s = trimmed.to_string();
    }
}
