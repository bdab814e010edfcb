//! Shared vocabulary: token ids, masked queries, candidates, decoder
//! configuration and the abstract masked-LM provider.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque index into a backend-owned subword vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One position of a query: either a concrete token or the mask sentinel.
///
/// The sentinel is out-of-band; bridges translate it to the backend's own
/// mask id at the wire boundary. `Token` orders before `Mask`, so among
/// partially filled states the one filled further left sorts first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Token(TokenId),
    Mask,
}

impl Slot {
    pub fn token(self) -> Option<TokenId> {
        match self {
            Slot::Token(t) => Some(t),
            Slot::Mask => None,
        }
    }

    pub fn is_mask(self) -> bool {
        matches!(self, Slot::Mask)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("mask span ({start}, {end}) out of bounds for a sequence of length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("query slots disagree with the mask span at position {0}")]
    MaskLayout(usize),
    #[error("confidence {value} at span offset {offset} is outside (0, 1]")]
    InvalidConfidence { offset: usize, value: f64 },
    #[error("expected {expected} confidences, got {got}")]
    ConfidenceCount { expected: usize, got: usize },
}

/// A token sequence whose positions `start..=end` (and only those) are masked.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedQuery {
    slots: Vec<Slot>,
    start: usize,
    end: usize,
    language: String,
}

impl MaskedQuery {
    /// Masks `span` (inclusive, 0-based) of `ids`.
    pub fn new(ids: &[TokenId], span: (usize, usize), language: &str) -> Result<Self, DomainError> {
        let (start, end) = span;
        if start > end || end >= ids.len() {
            return Err(DomainError::SpanOutOfBounds { start, end, len: ids.len() });
        }
        let slots = ids
            .iter()
            .enumerate()
            .map(|(k, &t)| if (start..=end).contains(&k) { Slot::Mask } else { Slot::Token(t) })
            .collect();
        Ok(Self { slots, start, end, language: language.to_string() })
    }

    /// `prefix`, then `mask_count` masks, then `suffix`.
    pub fn with_masks(
        prefix: &[TokenId],
        mask_count: usize,
        suffix: &[TokenId],
        language: &str,
    ) -> Result<Self, DomainError> {
        let len = prefix.len() + mask_count + suffix.len();
        if mask_count == 0 {
            return Err(DomainError::SpanOutOfBounds { start: prefix.len(), end: prefix.len(), len });
        }
        let slots = prefix
            .iter()
            .map(|&t| Slot::Token(t))
            .chain(std::iter::repeat_n(Slot::Mask, mask_count))
            .chain(suffix.iter().map(|&t| Slot::Token(t)))
            .collect();
        Ok(Self { slots, start: prefix.len(), end: prefix.len() + mask_count - 1, language: language.to_string() })
    }

    /// Builds a query from explicit slots, checking that exactly the span is masked.
    pub fn from_slots(slots: Vec<Slot>, span: (usize, usize), language: &str) -> Result<Self, DomainError> {
        let (start, end) = span;
        if start > end || end >= slots.len() {
            return Err(DomainError::SpanOutOfBounds { start, end, len: slots.len() });
        }
        if let Some(k) = slots.iter().enumerate().position(|(k, s)| s.is_mask() != (start..=end).contains(&k)) {
            return Err(DomainError::MaskLayout(k));
        }
        Ok(Self { slots, start, end, language: language.to_string() })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn span_positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn mask_count(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    /// Replaces the span with `fill`; `None` if the length does not match.
    pub fn fill(&self, fill: &[TokenId]) -> Option<Vec<TokenId>> {
        if fill.len() != self.mask_count() {
            return None;
        }
        let mut out = Vec::with_capacity(self.slots.len());
        for (k, slot) in self.slots.iter().enumerate() {
            match slot {
                Slot::Token(t) => out.push(*t),
                Slot::Mask => out.push(fill[k - self.start]),
            }
        }
        Some(out)
    }
}

/// Sum of log confidences, divided by the count when `length_norm` is set.
pub fn score_confidences(confidence: &[f64], length_norm: bool) -> Result<f64, DomainError> {
    let mut total = 0.0;
    for (offset, &c) in confidence.iter().enumerate() {
        if !(c > 0.0 && c <= 1.0) {
            return Err(DomainError::InvalidConfidence { offset, value: c });
        }
        total += c.ln();
    }
    if length_norm && !confidence.is_empty() {
        total /= confidence.len() as f64;
    }
    Ok(total)
}

/// A fully filled query together with per-position confidences and the
/// aggregate score.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    tokens: Vec<TokenId>,
    start: usize,
    confidence: Vec<f64>,
    score: f64,
    length_norm: bool,
}

impl Candidate {
    /// `tokens` is the full sequence; `span` the filled positions.
    pub fn new(
        tokens: Vec<TokenId>,
        span: (usize, usize),
        confidence: Vec<f64>,
        length_norm: bool,
    ) -> Result<Self, DomainError> {
        let (start, end) = span;
        if start > end || end >= tokens.len() {
            return Err(DomainError::SpanOutOfBounds { start, end, len: tokens.len() });
        }
        let expected = end - start + 1;
        if confidence.len() != expected {
            return Err(DomainError::ConfidenceCount { expected, got: confidence.len() });
        }
        let score = score_confidences(&confidence, length_norm)?;
        Ok(Self { tokens, start, confidence, score, length_norm })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// The tokens placed into the masked span.
    pub fn filled(&self) -> &[TokenId] {
        &self.tokens[self.start..self.start + self.confidence.len()]
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.start + self.confidence.len() - 1)
    }

    pub fn mask_count(&self) -> usize {
        self.confidence.len()
    }

    pub fn length_norm(&self) -> bool {
        self.length_norm
    }

    /// Same tokens and confidences, scored under a different normalization.
    pub fn renormalized(&self, length_norm: bool) -> Self {
        let score = score_confidences(&self.confidence, length_norm).expect("confidences validated at construction");
        Self { score, length_norm, ..self.clone() }
    }
}

/// How the masked span is filled initially.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Independent,
    Order,
    Confidence,
}

/// How filled predictions are revised afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStrategy {
    None,
    Order,
    Confidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub max_masks: usize,
    pub max_iterations: usize,
    pub beam: usize,
    pub init: InitStrategy,
    pub refine: RefineStrategy,
    pub length_norm: bool,
    pub recompute: bool,
}

/// Languages whose entities mostly fit in five subword tokens.
const SHORT_ENTITY_LANGUAGES: &[&str] = &["en", "fr", "nl", "es"];

impl DecoderConfig {
    /// Defaults for `language`: M=5 for en/fr/nl/es and 10 otherwise, T=2M, B=1,
    /// confidence-based init and refinement.
    pub fn for_language(language: &str) -> Self {
        let max_masks = if SHORT_ENTITY_LANGUAGES.contains(&language) { 5 } else { 10 };
        Self::with_max_masks(max_masks)
    }

    pub fn with_max_masks(max_masks: usize) -> Self {
        Self {
            max_masks,
            max_iterations: 2 * max_masks,
            beam: 1,
            init: InitStrategy::Confidence,
            refine: RefineStrategy::Confidence,
            length_norm: false,
            recompute: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_masks == 0 {
            return Err("max_masks must be at least 1".into());
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        if self.beam == 0 {
            return Err("beam must be at least 1".into());
        }
        Ok(())
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::with_max_masks(5)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownId(TokenId),
    #[error("query has no mask positions")]
    NoMask,
    #[error("backend error {code}: {message}")]
    Backend { code: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{0}")]
    Transport(String),
}

/// Ranked `(token, log-probability)` pairs for one masked position.
pub type Ranked = Vec<(TokenId, f64)>;

/// Abstract masked LM: for a query with one or more masks, the conditional
/// distribution over the vocabulary at every masked position.
///
/// Implementations must be deterministic within a session. Each returned list
/// is sorted by descending log-probability (ties by ascending id) and holds at
/// most `top_k` entries; with `top_k >= vocab_size()` it is the full
/// distribution. Zero-probability tokens carry `f64::NEG_INFINITY`.
pub trait DistributionProvider {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError>;
    fn detokenize(&self, ids: &[TokenId]) -> Result<String, ProviderError>;
    fn vocab_size(&self) -> usize;
    fn predict(&self, slots: &[Slot], top_k: usize) -> Result<Vec<Ranked>, ProviderError>;

    /// Several independent queries; remote providers may pipeline these.
    fn predict_batch(&self, queries: &[Vec<Slot>], top_k: usize) -> Result<Vec<Vec<Ranked>>, ProviderError> {
        queries.iter().map(|q| self.predict(q, top_k)).collect()
    }
}

impl<P: DistributionProvider + ?Sized> DistributionProvider for &P {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        (**self).tokenize(text)
    }
    fn detokenize(&self, ids: &[TokenId]) -> Result<String, ProviderError> {
        (**self).detokenize(ids)
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn predict(&self, slots: &[Slot], top_k: usize) -> Result<Vec<Ranked>, ProviderError> {
        (**self).predict(slots, top_k)
    }
    fn predict_batch(&self, queries: &[Vec<Slot>], top_k: usize) -> Result<Vec<Vec<Ranked>>, ProviderError> {
        (**self).predict_batch(queries, top_k)
    }
}

impl<P: DistributionProvider + ?Sized> DistributionProvider for Box<P> {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        (**self).tokenize(text)
    }
    fn detokenize(&self, ids: &[TokenId]) -> Result<String, ProviderError> {
        (**self).detokenize(ids)
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn predict(&self, slots: &[Slot], top_k: usize) -> Result<Vec<Ranked>, ProviderError> {
        (**self).predict(slots, top_k)
    }
    fn predict_batch(&self, queries: &[Vec<Slot>], top_k: usize) -> Result<Vec<Vec<Ranked>>, ProviderError> {
        (**self).predict_batch(queries, top_k)
    }
}

/// Sorts a ranked list into provider order: descending log-probability,
/// ascending token id on ties.
pub fn sort_ranked(list: &mut Ranked) {
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}
