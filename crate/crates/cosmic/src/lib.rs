//! Desk-scale speech-LLM pipeline.
//!
//! A CTC-trained compressor turns log-mel frames into a short sequence of
//! label-segment vectors; a trainable audio encoder projects those into the
//! embedding space of a small frozen decoder-only LM carrying rank-2 LoRA
//! adapters. Instruction tuning over ASR and speech-QA supervision, N-shot
//! speech in-context-learning prompt assembly, and a full evaluation harness
//! (WER, U-WER/B-WER contextual biasing, BLEU, ROUGE-L) run end to end on a
//! synthetic tone-word corpus.

pub mod audio;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod prompting;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
