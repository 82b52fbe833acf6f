//! Robust domain adaptation for extractive reading comprehension.
//!
//! The pipeline builds pseudo question-answer pairs from documents and the
//! dialogues that discuss them, then alternates between fine-tuning a span
//! predictor on those pairs and training the question selector with a
//! policy-gradient reward taken from the span predictor's token F1.
//!
//! Module map:
//! - [`corpus`]: documents, dialogues, synthetic generation, noise injection, line format.
//! - [`text`]: tokenization, n-gram candidates, EM / token F1.
//! - [`nn`]: hashed embeddings, small dense networks with manual gradients, Adam, checkpoints.
//! - [`answer_extractor`]: matches answerer chats to document spans and filters by threshold.
//! - [`question_selector`]: scores preceding questioner chats and fuses the top ones.
//! - [`mrc`]: the span-prediction reader.
//! - [`reinforce`]: F1 rewards and the baseline-adjusted policy-gradient loss.
//! - [`trainer`]: pre-training, adaptation, evaluation, ablations and sweeps.

pub mod answer_extractor;
pub mod corpus;
pub mod error;
pub mod mrc;
pub mod nn;
pub mod question_selector;
pub mod reinforce;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
