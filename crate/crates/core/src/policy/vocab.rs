use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::seed::sha256_hex;
use crate::structured_io::{
    ANSWER_CLOSE, ANSWER_OPEN, BOS, EOS, FORMAT_INSTRUCTION, QUESTION_MARK, THINK_CLOSE,
    THINK_OPEN,
};
use crate::synvqa::words::{
    cell_token, Category, Color, SceneClass, Shape, Size, MAX_COUNT, REGION_NAMES,
};
use crate::synvqa::{GenConfig, SCENE_CLOSE, SCENE_OPEN};

const QUESTION_WORDS: &[&str] = &[
    "what", "color", "is", "the", "object", "at", "size", "shape", "how", "many", "vehicle",
    "where", "scene", "shown",
];
const REASONING_WORDS: &[&str] = &["holds", "asked", "none", "count", "region", "header", "shows"];

/// Bijective token <-> id table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list; duplicates are dropped.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut v = Vocab { tokens: Vec::new(), ids: HashMap::new() };
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    fn insert(&mut self, t: &str) {
        if !self.ids.contains_key(t) {
            self.ids.insert(t.to_string(), self.tokens.len());
            self.tokens.push(t.to_string());
        }
    }

    /// Every token the generator, prompts and gold completions can produce for `cfg`'s grid.
    pub fn for_generator(cfg: &GenConfig) -> Self {
        let mut words: Vec<String> = [
            BOS, EOS, SCENE_OPEN, SCENE_CLOSE, QUESTION_MARK, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN,
            ANSWER_CLOSE,
        ]
        .iter()
        .chain(FORMAT_INSTRUCTION.iter())
        .chain(QUESTION_WORDS)
        .chain(REASONING_WORDS)
        .map(|s| s.to_string())
        .collect();
        words.extend(REGION_NAMES.iter().flat_map(|r| r.split(' ')).map(String::from));
        words.extend(["yes", "no"].map(String::from));
        words.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        words.extend(Size::ALL.iter().map(|c| c.word().to_string()));
        words.extend(Shape::ALL.iter().map(|c| c.word().to_string()));
        words.extend(Category::ALL.iter().map(|c| c.word().to_string()));
        words.extend(Category::ALL.iter().map(|c| c.plural().to_string()));
        words.extend(SceneClass::ALL.iter().map(|c| c.word().to_string()));
        words.extend((0..=MAX_COUNT).map(|n| n.to_string()));
        for r in 0..cfg.grid_height {
            for c in 0..cfg.grid_width {
                words.push(cell_token(r, c));
            }
        }
        Self::from_tokens(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("token id {id} out of range")))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `<eos>`, if present.
    pub fn eos(&self) -> Option<usize> {
        self.ids.get(EOS).copied()
    }

    /// Short content hash identifying this exact token table.
    pub fn hash(&self) -> String {
        sha256_hex(self.tokens.join("\n").as_bytes())[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structured_io::{build_prompt, target_words, PromptMode};
    use crate::synvqa::generate_dataset;

    #[test]
    fn bijection_and_stability() {
        let cfg = GenConfig::default();
        let v = Vocab::for_generator(&cfg);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t).unwrap(), i);
        }
        assert_eq!(v.hash(), Vocab::for_generator(&cfg).hash());
        let bigger = Vocab::for_generator(&GenConfig { grid_width: 7, ..cfg });
        assert_ne!(v.hash(), bigger.hash());
    }

    #[test]
    fn covers_all_generated_text() {
        let cfg = GenConfig { n_total: 300, ..GenConfig::default() };
        let v = Vocab::for_generator(&cfg);
        for s in generate_dataset(&cfg).unwrap().samples() {
            v.encode(&build_prompt(s, PromptMode::Prompting, 256).unwrap()).unwrap();
            v.encode(&target_words(s)).unwrap();
        }
        assert!(matches!(v.id("dragon"), Err(Error::Vocabulary(_))));
    }
}
