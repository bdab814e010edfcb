//! Benchmark facts and entities, frequency-proportional sampling, answer
//! matching against alias lists, and macro-averaged accuracy.

mod data;
mod metrics;
mod run;
mod sample;

use thiserror::Error;

pub use data::{load_entities, load_facts, parse_entities, parse_facts, Entities, EntityRecord, Fact};
pub use metrics::{
    evaluate, evaluate_with, match_in_languages, match_prediction, normalize_surface, report_tsv, EvaluationReport,
    Ratio, RelationScore, RunRecord, SplitReport, Splits,
};
pub use run::{run_fact, RunOptions};
pub(crate) use sample::draw_index;
pub use sample::sample_facts;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
    #[error(transparent)]
    Decode(#[from] crate::decoder::DecodeError),
    #[error(transparent)]
    Provider(#[from] crate::domain::ProviderError),
}
