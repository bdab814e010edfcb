//! A count-table masked LM and an exhaustive best-fill search over it.
//!
//! `TableLm` answers a query by looking at every corpus sentence of the same
//! length that agrees with the query on all unmasked positions. With
//! additive smoothing `alpha`, the probability of token `w` at a masked
//! position `k` is
//!
//! ```text
//! (count(matches with w at k) + alpha) / (count(matches) + alpha * |V|)
//! ```
//!
//! When nothing matches and `alpha == 0` the distribution is uniform, which is
//! the `alpha -> 0+` limit of the smoothed formula.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use thiserror::Error;

use crate::domain::{
    sort_ranked, Candidate, DistributionProvider, DomainError, MaskedQuery, ProviderError, Ranked, Slot, TokenId,
};

/// Largest number of fills the exhaustive search will score.
pub const MAX_ENUMERATED_FILLS: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("smoothing constant must be finite and non-negative, got {0}")]
    BadAlpha(f64),
    #[error("token id {0} is outside the declared vocabulary")]
    IdOutOfRange(TokenId),
    #[error("search space of {0} fills exceeds the cap of {MAX_ENUMERATED_FILLS}")]
    SearchSpaceTooLarge(u128),
    #[error("every fill has zero probability")]
    NoViableFill,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("reading corpus: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TableLm {
    by_len: HashMap<usize, Vec<Vec<TokenId>>>,
    alpha: f64,
    vocab_size: usize,
    words: Option<Vec<String>>,
}

impl TableLm {
    /// Builds from id sentences over the vocabulary `0..vocab_size`.
    pub fn from_ids(sentences: Vec<Vec<TokenId>>, vocab_size: usize, alpha: f64) -> Result<Self, ToyError> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(ToyError::BadAlpha(alpha));
        }
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(ToyError::EmptyCorpus);
        }
        let mut by_len: HashMap<usize, Vec<Vec<TokenId>>> = HashMap::new();
        for s in sentences.into_iter().filter(|s| !s.is_empty()) {
            if let Some(&bad) = s.iter().find(|t| t.0 as usize >= vocab_size) {
                return Err(ToyError::IdOutOfRange(bad));
            }
            by_len.entry(s.len()).or_default().push(s);
        }
        Ok(Self { by_len, alpha, vocab_size, words: None })
    }

    /// Builds from whitespace-tokenized text. The vocabulary is the sorted set
    /// of corpus words plus `extra_vocab`; ids follow that order.
    pub fn from_text<S: AsRef<str>>(lines: &[S], alpha: f64, extra_vocab: &[&str]) -> Result<Self, ToyError> {
        let sentences: Vec<Vec<&str>> =
            lines.iter().map(|l| l.as_ref().split_whitespace().collect::<Vec<_>>()).filter(|s| !s.is_empty()).collect();
        if sentences.is_empty() {
            return Err(ToyError::EmptyCorpus);
        }
        let words: Vec<String> = sentences
            .iter()
            .flatten()
            .copied()
            .chain(extra_vocab.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect();
        let index: HashMap<&str, TokenId> =
            words.iter().enumerate().map(|(i, w)| (w.as_str(), TokenId(i as u32))).collect();
        let ids = sentences.iter().map(|s| s.iter().map(|w| index[w]).collect()).collect();
        let mut lm = Self::from_ids(ids, words.len(), alpha)?;
        lm.words = Some(words);
        Ok(lm)
    }

    /// One whitespace-separated sentence per line; blank lines are ignored.
    pub fn from_corpus_file(path: &Path, alpha: f64) -> Result<Self, ToyError> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        Self::from_text(&lines, alpha, &[])
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn words(&self) -> Option<&[String]> {
        self.words.as_deref()
    }

    /// Id of a vocabulary word (text-built models only).
    pub fn id(&self, word: &str) -> Option<TokenId> {
        let words = self.words.as_ref()?;
        words.binary_search_by(|w| w.as_str().cmp(word)).ok().map(|i| TokenId(i as u32))
    }

    /// Exact probabilities (not logs) at every masked position of `slots`.
    pub fn probabilities(&self, slots: &[Slot]) -> Result<Vec<Vec<f64>>, ProviderError> {
        for s in slots {
            if let Slot::Token(t) = s {
                if t.0 as usize >= self.vocab_size {
                    return Err(ProviderError::UnknownId(*t));
                }
            }
        }
        let masked: Vec<usize> = slots.iter().enumerate().filter(|(_, s)| s.is_mask()).map(|(k, _)| k).collect();
        if masked.is_empty() {
            return Err(ProviderError::NoMask);
        }
        let matches: Vec<&Vec<TokenId>> = self
            .by_len
            .get(&slots.len())
            .map(|v| {
                v.iter()
                    .filter(|s| slots.iter().zip(s.iter()).all(|(q, t)| q.token().is_none_or(|q| q == *t)))
                    .collect()
            })
            .unwrap_or_default();
        let v = self.vocab_size as f64;
        let total = matches.len() as f64;
        Ok(masked
            .iter()
            .map(|&k| {
                if matches.is_empty() && self.alpha == 0.0 {
                    return vec![1.0 / v; self.vocab_size];
                }
                let mut counts = vec![0usize; self.vocab_size];
                for s in &matches {
                    counts[s[k].0 as usize] += 1;
                }
                let denom = total + self.alpha * v;
                counts.iter().map(|&c| (c as f64 + self.alpha) / denom).collect()
            })
            .collect())
    }
}

impl DistributionProvider for TableLm {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| ProviderError::UnknownToken(w.to_string()))).collect()
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, ProviderError> {
        match &self.words {
            Some(words) => ids
                .iter()
                .map(|t| words.get(t.0 as usize).map(String::as_str).ok_or(ProviderError::UnknownId(*t)))
                .collect::<Result<Vec<_>, _>>()
                .map(|w| w.join(" ")),
            None => Ok(ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")),
        }
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(&self, slots: &[Slot], top_k: usize) -> Result<Vec<Ranked>, ProviderError> {
        Ok(self
            .probabilities(slots)?
            .into_iter()
            .map(|probs| {
                let mut ranked: Ranked =
                    probs.into_iter().enumerate().map(|(i, p)| (TokenId(i as u32), p.ln())).collect();
                sort_ranked(&mut ranked);
                ranked.truncate(top_k);
                ranked
            })
            .collect())
    }
}

/// Pseudo-log-likelihood of one fill: each position's probability with only
/// that position masked and every other span position holding the fill.
/// Returns the per-position probabilities (zeros allowed).
pub fn fill_confidences<P: DistributionProvider + ?Sized>(
    q: &MaskedQuery,
    p: &P,
    fill: &[TokenId],
) -> Result<Vec<f64>, ProviderError> {
    let full = q.fill(fill).expect("fill length matches the span");
    let (start, _) = q.span();
    let queries: Vec<Vec<Slot>> = (0..fill.len())
        .map(|offset| {
            let mut slots: Vec<Slot> = full.iter().map(|&t| Slot::Token(t)).collect();
            slots[start + offset] = Slot::Mask;
            slots
        })
        .collect();
    let dists = p.predict_batch(&queries, p.vocab_size())?;
    Ok(dists
        .iter()
        .zip(fill)
        .map(|(d, tok)| d[0].iter().find(|(t, _)| t == tok).map_or(0.0, |(_, lp)| lp.exp()))
        .collect())
}

/// Exhaustive search over every fill of the span, scoring each by its
/// pseudo-log-likelihood (optionally length-normalized). Ties go to the
/// lexicographically smallest fill.
pub fn brute_force_best_fill<P: DistributionProvider + ?Sized>(
    q: &MaskedQuery,
    p: &P,
    length_norm: bool,
) -> Result<Candidate, ToyError> {
    let m = q.mask_count();
    let v = p.vocab_size();
    let space = (v as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    if space > MAX_ENUMERATED_FILLS as u128 {
        return Err(ToyError::SearchSpaceTooLarge(space));
    }
    let mut best: Option<(f64, Vec<TokenId>, Vec<f64>)> = None;
    let mut fill = vec![TokenId(0); m];
    for _ in 0..space {
        let conf = fill_confidences(q, p, &fill)?;
        let score = pll(&conf, length_norm);
        let better = match &best {
            None => true,
            Some((s, f, _)) => score > *s || (score == *s && fill < *f),
        };
        if better {
            best = Some((score, fill.clone(), conf));
        }
        advance(&mut fill, v);
    }
    let (score, fill, conf) = best.expect("at least one fill");
    if score == f64::NEG_INFINITY {
        return Err(ToyError::NoViableFill);
    }
    Ok(Candidate::new(q.fill(&fill).expect("length checked"), q.span(), conf, length_norm)?)
}

fn pll(conf: &[f64], length_norm: bool) -> f64 {
    let mut total = 0.0;
    for &c in conf {
        total += c.ln();
    }
    if length_norm {
        total /= conf.len() as f64;
    }
    total
}

// Odometer over the vocabulary, rightmost position fastest.
fn advance(fill: &mut [TokenId], v: usize) {
    for t in fill.iter_mut().rev() {
        if (t.0 as usize) + 1 < v {
            t.0 += 1;
            return;
        }
        t.0 = 0;
    }
}
