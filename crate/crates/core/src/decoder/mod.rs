//! Multi-token decoding for masked LMs.
//!
//! A span of `m` masks is filled by an initial prediction (independent,
//! left-to-right, or highest-confidence-first), then optionally refined by
//! re-masking one position at a time. `decode` repeats this for every
//! `m` in `1..=max_masks` and keeps the fill with the best pseudo-log-likelihood.
//!
//! All provider calls go through [`DistributionProvider`]; argmax ties break
//! toward the smaller token id, then toward the leftmost position.

mod beam;
mod counting;
mod greedy;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{Candidate, DistributionProvider, DomainError, MaskedQuery, ProviderError, Slot, TokenId};

pub use beam::{beam_decode, BeamItem};
pub use counting::CountingProvider;
pub use greedy::{
    greedy_decode, predict_autoregressive, predict_independent, recompute_confidence, refine, AutoregressiveOrder,
    Refined,
};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("provider returned {got} distributions for {expected} masks")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("provider returned an empty distribution")]
    EmptyDistribution,
    #[error("query for {0} masks: {1}")]
    Query(usize, String),
}

/// Score of a candidate: sum of log confidences, averaged over the span when
/// `length_norm` is set.
pub fn score_candidate(cand: &Candidate, length_norm: bool) -> Result<f64, DomainError> {
    crate::domain::score_confidences(cand.confidence(), length_norm)
}

/// Best fill over all tried mask counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub best: Candidate,
    pub per_m: BTreeMap<usize, Candidate>,
}

impl DecodeResult {
    pub fn best_mask_count(&self) -> usize {
        self.best.mask_count()
    }
}

/// Mask count with the highest score; ties go to the smaller count.
pub fn select_mask_count<I: IntoIterator<Item = (usize, f64)>>(scores: I) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (m, s) in scores {
        best = match best {
            Some((bm, bs)) if bs > s || (bs == s && bm < m) => Some((bm, bs)),
            _ => Some((m, s)),
        };
    }
    best.map(|(m, _)| m)
}

/// Runs beam decoding for every mask count `1..=cfg.max_masks` and keeps the
/// best-scoring candidate overall.
pub fn decode<P, F>(mut q_builder: F, p: &P, cfg: &crate::domain::DecoderConfig) -> Result<DecodeResult, DecodeError>
where
    P: DistributionProvider + ?Sized,
    F: FnMut(usize) -> Result<MaskedQuery, DecodeError>,
{
    cfg.validate().map_err(DecodeError::Config)?;
    let mut per_m = BTreeMap::new();
    for m in 1..=cfg.max_masks {
        let q = q_builder(m)?;
        if q.mask_count() != m {
            return Err(DecodeError::Query(m, format!("builder produced {} masks", q.mask_count())));
        }
        let items = beam_decode(&q, p, cfg)?;
        let top = items.into_iter().next().expect("beam_decode returns at least one item");
        per_m.insert(m, top.candidate);
    }
    let m = select_mask_count(per_m.iter().map(|(&m, c)| (m, c.score()))).expect("max_masks >= 1");
    Ok(DecodeResult { best: per_m[&m].clone(), per_m })
}

/// Probability carried by a candidate for a provider log-probability.
/// Zero probabilities are clamped to the smallest positive normal double so
/// the candidate stays well formed and ranks below every possible fill.
pub(crate) fn confidence_of(logprob: f64) -> f64 {
    let p = logprob.exp();
    if p > 0.0 {
        p.min(1.0)
    } else {
        f64::MIN_POSITIVE
    }
}

/// Working state of a fill in progress: the full slot row plus a confidence
/// for every filled span position.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Partial {
    pub slots: Vec<Slot>,
    pub start: usize,
    pub conf: Vec<Option<f64>>,
}

impl Partial {
    pub fn new(q: &MaskedQuery) -> Self {
        Self { slots: q.slots().to_vec(), start: q.span().0, conf: vec![None; q.mask_count()] }
    }

    pub fn from_candidate(cand: &Candidate) -> Self {
        Self {
            slots: cand.tokens().iter().map(|&t| Slot::Token(t)).collect(),
            start: cand.span().0,
            conf: cand.confidence().iter().map(|&c| Some(c)).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.conf.len()
    }

    pub fn span_slots(&self) -> &[Slot] {
        &self.slots[self.start..self.start + self.m()]
    }

    pub fn token_at(&self, offset: usize) -> Option<TokenId> {
        self.slots[self.start + offset].token()
    }

    pub fn set(&mut self, offset: usize, token: TokenId, conf: f64) {
        self.slots[self.start + offset] = Slot::Token(token);
        self.conf[offset] = Some(conf);
    }

    pub fn masked_offsets(&self) -> Vec<usize> {
        (0..self.m()).filter(|&o| self.slots[self.start + o].is_mask()).collect()
    }

    /// Slots with `offset` re-masked.
    pub fn with_masked(&self, offset: usize) -> Vec<Slot> {
        let mut s = self.slots.clone();
        s[self.start + offset] = Slot::Mask;
        s
    }

    /// Sum of log confidences over filled positions, left to right.
    pub fn log_score(&self) -> f64 {
        let mut total = 0.0;
        for c in self.conf.iter().flatten() {
            total += c.ln();
        }
        total
    }

    pub fn into_candidate(self, length_norm: bool) -> Result<Candidate, DecodeError> {
        let m = self.m();
        let tokens = self
            .slots
            .iter()
            .map(|s| s.token().ok_or_else(|| DecodeError::Config("candidate still holds a mask".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let conf = self.conf.into_iter().map(|c| c.expect("filled position has a confidence")).collect();
        Ok(Candidate::new(tokens, (self.start, self.start + m - 1), conf, length_norm)?)
    }

    /// Re-evaluates every filled position's confidence with only that
    /// position masked and the rest of the row as it currently stands.
    pub fn recompute<P: DistributionProvider + ?Sized>(&mut self, p: &P) -> Result<(), DecodeError> {
        let offsets: Vec<usize> = (0..self.m()).filter(|&o| self.token_at(o).is_some()).collect();
        if offsets.is_empty() {
            return Ok(());
        }
        let queries: Vec<Vec<Slot>> = offsets.iter().map(|&o| self.with_masked(o)).collect();
        let dists = p.predict_batch(&queries, p.vocab_size())?;
        if dists.len() != offsets.len() {
            return Err(DecodeError::ShapeMismatch { expected: offsets.len(), got: dists.len() });
        }
        for ((&o, query), d) in offsets.iter().zip(&queries).zip(dists) {
            let target = self.token_at(o).expect("filled");
            let rank = mask_rank(query, self.start + o);
            let list = d.get(rank).ok_or(DecodeError::ShapeMismatch { expected: rank + 1, got: d.len() })?;
            let lp = list.iter().find(|(t, _)| *t == target).map_or(f64::NEG_INFINITY, |(_, lp)| *lp);
            self.conf[o] = Some(confidence_of(lp));
        }
        Ok(())
    }
}

/// Index, within a predict response, of the distribution for `position`:
/// responses hold one list per masked slot, in slot order.
pub(crate) fn mask_rank(slots: &[Slot], position: usize) -> usize {
    slots[..position].iter().filter(|s| s.is_mask()).count()
}

pub(crate) fn check_shape(slots: &[Slot], got: usize) -> Result<(), DecodeError> {
    let expected = slots.iter().filter(|s| s.is_mask()).count();
    if expected != got {
        return Err(DecodeError::ShapeMismatch { expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_prefers_higher_score_then_smaller_m() {
        let fig1 = [(1, -1.90), (2, -0.61), (3, -1.82), (4, -3.58), (5, -3.06)];
        assert_eq!(select_mask_count(fig1), Some(2));
        assert_eq!(select_mask_count([(3, -1.0), (1, -1.0), (2, -2.0)]), Some(1));
        assert_eq!(select_mask_count(std::iter::empty()), None);
    }

    #[test]
    fn zero_probability_is_clamped() {
        assert_eq!(confidence_of(f64::NEG_INFINITY), f64::MIN_POSITIVE);
        assert_eq!(confidence_of(0.0), 1.0);
        assert!((confidence_of(0.5f64.ln()) - 0.5).abs() < 1e-15);
    }
}
