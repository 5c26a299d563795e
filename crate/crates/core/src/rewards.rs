//! Rule-based dual reward: format compliance plus answer correctness.

use serde::{Deserialize, Serialize};

use crate::structured_io::{normalize_answer, parse_structured, StructuredResponse};

/// A reward value held exactly as a count of halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(into = "f64")]
pub struct Reward(u8);

impl Reward {
    pub const ZERO: Reward = Reward(0);
    pub const FORMAT: Reward = Reward(1);
    pub const ACCURACY: Reward = Reward(3);

    pub fn halves(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }
}

impl std::ops::Add for Reward {
    type Output = Reward;
    fn add(self, rhs: Reward) -> Reward {
        Reward(self.0 + rhs.0)
    }
}

impl From<Reward> for f64 {
    fn from(r: Reward) -> f64 {
        r.value()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: Reward,
    pub accuracy: Reward,
    pub total: Reward,
}

/// 0.5 iff the response is well formed.
pub fn format_reward(resp: &StructuredResponse) -> Reward {
    if resp.well_formed {
        Reward::FORMAT
    } else {
        Reward::ZERO
    }
}

/// 1.5 iff an answer segment was extracted and matches `gold` after normalization.
/// Does not require the think segment.
pub fn accuracy_reward(resp: &StructuredResponse, gold: &str) -> Reward {
    match &resp.answer {
        Some(a) if normalize_answer(a) == normalize_answer(gold) => Reward::ACCURACY,
        _ => Reward::ZERO,
    }
}

pub fn total_reward(resp: &StructuredResponse, gold: &str) -> RewardBreakdown {
    let format = format_reward(resp);
    let accuracy = accuracy_reward(resp, gold);
    RewardBreakdown {
        format,
        accuracy,
        total: format + accuracy,
    }
}

/// Whether the accuracy reward is granted on its own or only to well-formed responses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyRule {
    #[default]
    Independent,
    RequiresFormat,
}

/// Parses `raw` and scores it.
pub fn score_text(raw: &str, gold: &str) -> RewardBreakdown {
    total_reward(&parse_structured(raw), gold)
}

pub fn score_text_with(raw: &str, gold: &str, rule: AccuracyRule) -> RewardBreakdown {
    let mut r = score_text(raw, gold);
    if rule == AccuracyRule::RequiresFormat && r.format == Reward::ZERO {
        r.accuracy = Reward::ZERO;
        r.total = r.format;
    }
    r
}

/// Sums of format and accuracy rewards in halves; exact for any batch size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RewardTally {
    pub count: u64,
    pub format_halves: u64,
    pub accuracy_halves: u64,
}

impl RewardTally {
    pub fn add(&mut self, r: &RewardBreakdown) {
        self.count += 1;
        self.format_halves += u64::from(r.format.halves());
        self.accuracy_halves += u64::from(r.accuracy.halves());
    }

    pub fn format_mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.format_halves as f64 / (2 * self.count) as f64
        }
    }

    pub fn accuracy_mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.accuracy_halves as f64 / (2 * self.count) as f64
        }
    }
}
