//! Desk-scale SFT + multi-stage GRPO laboratory for structured visual question answering.

pub mod curriculum;
pub mod error;
pub mod evaluation;
pub mod grpo;
pub mod policy;
pub mod rewards;
pub mod seed;
pub mod sft;
pub mod structured_io;
pub mod synvqa;

pub use error::{Error, Result};
