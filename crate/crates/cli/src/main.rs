//! `cloze-forge`: decode, evaluate, sample, debug prompts, generate
//! code-switched corpora and serve the toy model over the bridge protocol.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (backend, I/O during a
//! run), 2 on a configuration or data error.

mod backend;
mod decode;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cloze_forge::csgen::Segmentation;
use cloze_forge::{DecoderConfig, InitStrategy, RefineStrategy};

/// A configuration or data problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Wraps any displayable error as a [`ConfigError`].
pub fn config<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> ConfigError {
    move |e| ConfigError(format!("{context}: {e}"))
}

#[derive(Parser, Debug)]
#[command(name = "cloze-forge", version, about = "Multi-token factual probing of masked language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decode the object slot of every fact and append one record per fact.
    Decode(DecodeArgs),
    /// Score a results file against gold aliases.
    Eval(EvalArgs),
    /// Draw facts per relation, proportionally to frequency.
    Sample(SampleArgs),
    /// Parse or instantiate a prompt template.
    #[command(subcommand)]
    Prompt(PromptCommand),
    /// Code-switch entity mentions and plan masks for a mention corpus.
    Csgen(CsgenArgs),
    /// Serve the toy count model over the bridge protocol (stdio or TCP).
    ServeToy(ServeToyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Independent,
    Order,
    Confidence,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RefineArg {
    None,
    Order,
    Confidence,
}

#[derive(Args, Debug)]
pub struct DecoderArgs {
    #[arg(long, value_enum, default_value = "confidence")]
    init: InitArg,
    #[arg(long, value_enum, default_value = "confidence")]
    refine: RefineArg,
    /// Largest mask count tried (default: 5 for en/fr/nl/es, 10 otherwise).
    #[arg(long)]
    max_masks: Option<usize>,
    /// Refinement iteration cap (default: twice the mask count cap).
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Divide candidate scores by their mask count.
    #[arg(long)]
    length_norm: bool,
    /// Re-predict every position of the final fill before scoring.
    #[arg(long)]
    recompute: bool,
}

impl DecoderArgs {
    pub fn config(&self, language: &str) -> Result<DecoderConfig, ConfigError> {
        let mut cfg = match self.max_masks {
            Some(m) => DecoderConfig::with_max_masks(m),
            None => DecoderConfig::for_language(language),
        };
        if let Some(t) = self.max_iterations {
            cfg.max_iterations = t;
        }
        cfg.beam = self.beam;
        cfg.init = match self.init {
            InitArg::Independent => InitStrategy::Independent,
            InitArg::Order => InitStrategy::Order,
            InitArg::Confidence => InitStrategy::Confidence,
        };
        cfg.refine = match self.refine {
            RefineArg::None => RefineStrategy::None,
            RefineArg::Order => RefineStrategy::Order,
            RefineArg::Confidence => RefineStrategy::Confidence,
        };
        cfg.length_norm = self.length_norm;
        cfg.recompute = self.recompute;
        cfg.validate().map_err(|e| ConfigError(format!("decoder settings: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Backend: toy:<flags>, cmd:<command line> or tcp:<host:port>.
    #[arg(long)]
    backend: String,
    #[arg(long)]
    facts: PathBuf,
    #[arg(long)]
    entities: PathBuf,
    /// Directory of <relation>.<lang>.tmpl files.
    #[arg(long, default_value = "data/templates")]
    templates: PathBuf,
    #[arg(long)]
    language: String,
    /// Results file (JSON lines); an existing file is resumed.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Per-request backend timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    #[command(flatten)]
    decoder: DecoderArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    All,
    Single,
    Multi,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    entities: PathBuf,
    /// Count a fact as correct when any gold-length candidate is.
    #[arg(long)]
    oracle_length: bool,
    /// Which split to print.
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Also accept aliases in this language (repeatable).
    #[arg(long = "also-match")]
    also_match: Vec<String>,
    /// Write the full report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the per-relation table as TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    facts: PathBuf,
    #[arg(long)]
    per_relation: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum PromptCommand {
    /// Print a template's syntax tree as JSON and its canonical text.
    Parse { template: PathBuf },
    /// Print the cloze sentence for one subject.
    Instantiate(InstantiateArgs),
}

#[derive(Args, Debug)]
pub struct InstantiateArgs {
    template: PathBuf,
    /// Subject surface form, used when no entity file is given.
    #[arg(long, conflicts_with = "subject")]
    label: Option<String>,
    /// Subject gender symbol (MASC, FEM, NEUT) for --label.
    #[arg(long, requires = "label")]
    gender: Option<String>,
    /// Subject entity id, looked up in --entities.
    #[arg(long, requires = "entities")]
    subject: Option<String>,
    #[arg(long)]
    entities: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    masks: usize,
    #[arg(long, default_value = "[MASK]")]
    mask_text: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SegmentationArg {
    Whitespace,
    Characters,
}

#[derive(Args, Debug)]
pub struct CsgenArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    entities: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.30)]
    p_switch: f64,
    #[arg(long, default_value_t = 0.15)]
    p_mask_word: f64,
    #[arg(long, default_value_t = 0.50)]
    p_mask_mention: f64,
    #[arg(long, value_enum, default_value = "whitespace")]
    segmentation: SegmentationArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl CsgenArgs {
    pub fn segmentation(&self) -> Segmentation {
        match self.segmentation {
            SegmentationArg::Whitespace => Segmentation::Whitespace,
            SegmentationArg::Characters => Segmentation::Characters,
        }
    }
}

#[derive(Args, Debug)]
pub struct ServeToyArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Listen on host:port instead of stdio; the bound address is printed first.
    #[arg(long)]
    tcp: Option<String>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Decode(a) => decode::run(a),
        Command::Eval(a) => tools::eval(a),
        Command::Sample(a) => tools::sample(a),
        Command::Prompt(c) => tools::prompt(c),
        Command::Csgen(a) => tools::csgen(a),
        Command::ServeToy(a) => tools::serve_toy(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
