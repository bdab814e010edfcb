//! Multi-token cloze decoding for masked language models, plus the benchmark
//! machinery around it: prompt templates, fact sampling and evaluation,
//! code-switched corpus generation, and a line-delimited JSON bridge to
//! external model backends.

pub mod bench;
pub mod bridge;
pub mod csgen;
pub mod decoder;
pub mod domain;
pub mod prompt;
pub mod toy_lm;

pub use domain::{
    Candidate, DecoderConfig, DistributionProvider, DomainError, InitStrategy, MaskedQuery, ProviderError, Ranked,
    RefineStrategy, Slot, TokenId,
};
