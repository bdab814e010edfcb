//! Single-hypothesis decoding: initial fills, refinement and confidence
//! recomputation.

use crate::domain::{
    Candidate, DecoderConfig, DistributionProvider, InitStrategy, MaskedQuery, RefineStrategy, TokenId,
};

use super::{check_shape, confidence_of, mask_rank, DecodeError, Partial};

/// Commit order for autoregressive filling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutoregressiveOrder {
    LeftToRight,
    Confidence,
}

/// Outcome of [`refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub candidate: Candidate,
    /// Re-predictions performed, each counting against the budget.
    pub iterations: usize,
    /// Whether the convergence test fired before the budget ran out.
    pub converged: bool,
}

/// Fills every mask from one provider call with all masks present.
pub fn predict_independent<P: DistributionProvider + ?Sized>(q: &MaskedQuery, p: &P) -> Result<Candidate, DecodeError> {
    let mut state = Partial::new(q);
    init_independent(&mut state, p, false)?;
    state.into_candidate(false)
}

/// Fills masks one at a time, each step conditioned on earlier commits.
pub fn predict_autoregressive<P: DistributionProvider + ?Sized>(
    q: &MaskedQuery,
    p: &P,
    order: AutoregressiveOrder,
) -> Result<Candidate, DecodeError> {
    let mut state = Partial::new(q);
    match order {
        AutoregressiveOrder::LeftToRight => init_order(&mut state, p, false)?,
        AutoregressiveOrder::Confidence => init_confidence(&mut state, p, false)?,
    }
    state.into_candidate(false)
}

/// Re-masks and re-predicts filled positions until convergence or until
/// `budget` re-predictions have been spent.
pub fn refine<P: DistributionProvider + ?Sized>(
    cand: &Candidate,
    q: &MaskedQuery,
    p: &P,
    strategy: RefineStrategy,
    budget: usize,
) -> Result<Refined, DecodeError> {
    check_matches(cand, q)?;
    let mut state = Partial::from_candidate(cand);
    let (iterations, converged) = refine_state(&mut state, p, strategy, budget, false)?;
    if iterations == 0 || state == Partial::from_candidate(cand) {
        return Ok(Refined { candidate: cand.clone(), iterations, converged });
    }
    Ok(Refined { candidate: state.into_candidate(cand.length_norm())?, iterations, converged })
}

/// Replaces every confidence with the probability of the committed token
/// given all other positions as filled. Tokens are never changed.
pub fn recompute_confidence<P: DistributionProvider + ?Sized>(
    cand: &Candidate,
    q: &MaskedQuery,
    p: &P,
) -> Result<Candidate, DecodeError> {
    check_matches(cand, q)?;
    let mut state = Partial::from_candidate(cand);
    state.recompute(p)?;
    state.into_candidate(cand.length_norm())
}

/// Greedy pipeline for one mask count: initial fill, then refinement within
/// the remaining iteration budget. With `cfg.recompute`, confidences are
/// refreshed after every commit or change.
pub fn greedy_decode<P: DistributionProvider + ?Sized>(
    q: &MaskedQuery,
    p: &P,
    cfg: &DecoderConfig,
) -> Result<Candidate, DecodeError> {
    cfg.validate().map_err(DecodeError::Config)?;
    let mut state = Partial::new(q);
    match cfg.init {
        InitStrategy::Independent => init_independent(&mut state, p, cfg.recompute)?,
        InitStrategy::Order => init_order(&mut state, p, cfg.recompute)?,
        InitStrategy::Confidence => init_confidence(&mut state, p, cfg.recompute)?,
    }
    let budget = cfg.max_iterations.saturating_sub(q.mask_count());
    refine_state(&mut state, p, cfg.refine, budget, cfg.recompute)?;
    state.into_candidate(cfg.length_norm)
}

fn check_matches(cand: &Candidate, q: &MaskedQuery) -> Result<(), DecodeError> {
    if cand.span() != q.span() || cand.tokens().len() != q.len() {
        return Err(DecodeError::Query(
            q.mask_count(),
            format!("candidate span {:?} does not match query span {:?}", cand.span(), q.span()),
        ));
    }
    Ok(())
}

fn init_independent<P: DistributionProvider + ?Sized>(
    state: &mut Partial,
    p: &P,
    recompute: bool,
) -> Result<(), DecodeError> {
    let dists = p.predict(&state.slots, 1)?;
    check_shape(&state.slots, dists.len())?;
    for (offset, list) in state.masked_offsets().into_iter().zip(&dists) {
        let &(tok, lp) = list.first().ok_or(DecodeError::EmptyDistribution)?;
        state.set(offset, tok, confidence_of(lp));
    }
    if recompute {
        state.recompute(p)?;
    }
    Ok(())
}

fn init_order<P: DistributionProvider + ?Sized>(
    state: &mut Partial,
    p: &P,
    recompute: bool,
) -> Result<(), DecodeError> {
    while let Some(&offset) = state.masked_offsets().first() {
        let dists = p.predict(&state.slots, 1)?;
        check_shape(&state.slots, dists.len())?;
        let &(tok, lp) = dists[0].first().ok_or(DecodeError::EmptyDistribution)?;
        state.set(offset, tok, confidence_of(lp));
        if recompute {
            state.recompute(p)?;
        }
    }
    Ok(())
}

fn init_confidence<P: DistributionProvider + ?Sized>(
    state: &mut Partial,
    p: &P,
    recompute: bool,
) -> Result<(), DecodeError> {
    loop {
        let masked = state.masked_offsets();
        if masked.is_empty() {
            return Ok(());
        }
        let dists = p.predict(&state.slots, 1)?;
        check_shape(&state.slots, dists.len())?;
        let mut pick: Option<(usize, TokenId, f64)> = None;
        for (&offset, list) in masked.iter().zip(&dists) {
            let &(tok, lp) = list.first().ok_or(DecodeError::EmptyDistribution)?;
            if pick.is_none_or(|(_, _, best)| lp > best) {
                pick = Some((offset, tok, lp));
            }
        }
        let (offset, tok, lp) = pick.expect("at least one masked position");
        state.set(offset, tok, confidence_of(lp));
        if recompute {
            state.recompute(p)?;
        }
    }
}

/// Returns (re-predictions used, converged).
pub(super) fn refine_state<P: DistributionProvider + ?Sized>(
    state: &mut Partial,
    p: &P,
    strategy: RefineStrategy,
    budget: usize,
    recompute: bool,
) -> Result<(usize, bool), DecodeError> {
    let m = state.m();
    let mut used = 0;
    match strategy {
        RefineStrategy::None => Ok((0, true)),
        RefineStrategy::Confidence => {
            while used < budget {
                let offset = lowest_confidence(&state.conf);
                let (tok, lp) = repredict(state, p, offset)?;
                used += 1;
                if Some(tok) == state.token_at(offset) {
                    return Ok((used, true));
                }
                state.set(offset, tok, confidence_of(lp));
                if recompute {
                    state.recompute(p)?;
                }
            }
            Ok((used, false))
        }
        RefineStrategy::Order => {
            let mut cursor = 0;
            let mut changed = false;
            while used < budget {
                let (tok, lp) = repredict(state, p, cursor)?;
                used += 1;
                if Some(tok) != state.token_at(cursor) {
                    state.set(cursor, tok, confidence_of(lp));
                    changed = true;
                    if recompute {
                        state.recompute(p)?;
                    }
                }
                cursor += 1;
                if cursor == m {
                    if !changed {
                        return Ok((used, true));
                    }
                    cursor = 0;
                    changed = false;
                }
            }
            Ok((used, false))
        }
    }
}

/// Leftmost position holding the minimum confidence.
pub(super) fn lowest_confidence(conf: &[Option<f64>]) -> usize {
    let mut best = 0;
    for (o, c) in conf.iter().enumerate() {
        if c.expect("filled") < conf[best].expect("filled") {
            best = o;
        }
    }
    best
}

fn repredict<P: DistributionProvider + ?Sized>(
    state: &Partial,
    p: &P,
    offset: usize,
) -> Result<(TokenId, f64), DecodeError> {
    let slots = state.with_masked(offset);
    let dists = p.predict(&slots, 1)?;
    check_shape(&slots, dists.len())?;
    let rank = mask_rank(&slots, state.start + offset);
    dists[rank].first().copied().ok_or(DecodeError::EmptyDistribution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Ranked, Slot};
    use crate::toy_lm::TableLm;
    use crate::ProviderError;

    fn lm(lines: &[&str]) -> TableLm {
        TableLm::from_text(lines, 0.0, &[]).unwrap()
    }

    fn q(lm: &TableLm, words: &str, span: (usize, usize)) -> MaskedQuery {
        MaskedQuery::new(&lm.tokenize(words).unwrap(), span, "en").unwrap()
    }

    fn text(lm: &TableLm, c: &Candidate) -> String {
        lm.detokenize(c.filled()).unwrap()
    }

    #[test]
    fn independent_on_single_sentence() {
        let m = lm(&["a b c"]);
        let c = predict_independent(&q(&m, "a b c", (1, 2)), &m).unwrap();
        assert_eq!(text(&m, &c), "b c");
        assert_eq!(c.confidence(), &[1.0, 1.0]);
    }

    #[test]
    fn independent_single_mask_is_argmax() {
        let m = lm(&["a b", "a c", "a c"]);
        let c = predict_independent(&q(&m, "a b", (1, 1)), &m).unwrap();
        assert_eq!(text(&m, &c), "c");
        assert!((c.confidence()[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    /// Provider that records every query it sees.
    struct Spy<'a> {
        inner: &'a TableLm,
        seen: std::cell::RefCell<Vec<Vec<Slot>>>,
    }

    impl DistributionProvider for Spy<'_> {
        fn tokenize(&self, t: &str) -> Result<Vec<TokenId>, ProviderError> {
            self.inner.tokenize(t)
        }
        fn detokenize(&self, ids: &[TokenId]) -> Result<String, ProviderError> {
            self.inner.detokenize(ids)
        }
        fn vocab_size(&self) -> usize {
            self.inner.vocab_size()
        }
        fn predict(&self, slots: &[Slot], top_k: usize) -> Result<Vec<Ranked>, ProviderError> {
            self.seen.borrow_mut().push(slots.to_vec());
            self.inner.predict(slots, top_k)
        }
    }

    #[test]
    fn independent_uses_one_call_for_both_ends() {
        let m = lm(&["a b c d", "b b c a"]);
        let spy = Spy { inner: &m, seen: Default::default() };
        let query = q(&m, "a b c d", (0, 3));
        let c = predict_independent(&query, &spy).unwrap();
        assert_eq!(spy.seen.borrow().len(), 1);
        assert_eq!(c.filled()[0], m.id("a").unwrap());
        assert_eq!(c.filled()[3], m.id("a").unwrap());
    }

    #[test]
    fn confidence_order_commits_most_certain_position_first() {
        // position 1: a 0.6 / b 0.4, position 2: c 0.9 / d 0.1
        let mut corpus = vec!["a c"; 6];
        corpus.extend(["b c"; 3]);
        corpus.push("b d");
        let m = lm(&corpus);
        let spy = Spy { inner: &m, seen: Default::default() };
        let query = q(&m, "a c", (0, 1));
        let c = predict_autoregressive(&query, &spy, AutoregressiveOrder::Confidence).unwrap();
        let seen = spy.seen.borrow();
        assert_eq!(seen[1], vec![Slot::Mask, Slot::Token(m.id("c").unwrap())]);
        assert_eq!(text(&m, &c), "a c");
        assert!((c.confidence()[1] - 0.9).abs() < 1e-12);
        assert!((c.confidence()[0] - 6.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn left_to_right_conditions_on_first_commit() {
        let m = lm(&["a b", "a c", "d c"]);
        let query = q(&m, "a b", (0, 1));
        let c = predict_autoregressive(&query, &m, AutoregressiveOrder::LeftToRight).unwrap();
        assert_eq!(text(&m, &c), "a b");
        assert!((c.confidence()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.confidence()[1] - 0.5).abs() < 1e-12);
        // independent picks the second-position marginal instead
        assert_eq!(text(&m, &predict_independent(&query, &m).unwrap()), "a c");
    }

    #[test]
    fn left_to_right_single_mask_equals_independent() {
        let m = lm(&["a b", "a c", "a c", "d b"]);
        let query = q(&m, "a b", (1, 1));
        assert_eq!(
            predict_autoregressive(&query, &m, AutoregressiveOrder::LeftToRight).unwrap(),
            predict_independent(&query, &m).unwrap()
        );
    }

    #[test]
    fn refine_at_fixed_point_is_unchanged() {
        let m = lm(&["a b c"]);
        let query = q(&m, "a b c", (1, 2));
        let c = predict_independent(&query, &m).unwrap();
        let r = refine(&c, &query, &m, RefineStrategy::Order, 10).unwrap();
        assert_eq!((r.candidate.clone(), r.iterations, r.converged), (c.clone(), 2, true));
        let r = refine(&c, &query, &m, RefineStrategy::Confidence, 10).unwrap();
        assert_eq!((r.candidate, r.iterations, r.converged), (c, 1, true));
    }

    #[test]
    fn refine_with_zero_budget_is_identity() {
        let m = lm(&["a b c"]);
        let query = q(&m, "a b c", (1, 2));
        let ids = m.tokenize("a b b").unwrap();
        let c = Candidate::new(ids, (1, 2), vec![0.3, 0.2], false).unwrap();
        for s in [RefineStrategy::Order, RefineStrategy::Confidence, RefineStrategy::None] {
            let r = refine(&c, &query, &m, s, 0).unwrap();
            assert_eq!(r.candidate, c);
            assert_eq!(r.iterations, 0);
        }
    }

    #[test]
    fn one_confidence_step_repairs_incoherent_pair() {
        let m = lm(&["a b c"]);
        let query = q(&m, "a b c", (1, 2));
        let c = Candidate::new(m.tokenize("a b b").unwrap(), (1, 2), vec![1.0, 0.5], false).unwrap();
        let r = refine(&c, &query, &m, RefineStrategy::Confidence, 1).unwrap();
        assert_eq!(text(&m, &r.candidate), "b c");
        assert_eq!(r.candidate.confidence(), &[1.0, 1.0]);
        assert_eq!((r.iterations, r.converged), (1, false));
    }

    #[test]
    fn independent_then_refine_fixes_symmetric_corpus() {
        // Independent fill ties on both positions and picks (b, b), which
        // never occurs; refinement moves to an attested sentence.
        let m = lm(&["a b c", "a c b"]);
        let query = q(&m, "a b c", (1, 2));
        let init = predict_independent(&query, &m).unwrap();
        assert_eq!(text(&m, &init), "b b");
        for s in [RefineStrategy::Order, RefineStrategy::Confidence] {
            let r = refine(&init, &query, &m, s, 10).unwrap();
            assert_eq!(text(&m, &r.candidate), "c b");
            assert!(r.converged);
        }
    }

    #[test]
    fn recompute_example() {
        let m = lm(&["a b c", "a b d"]);
        let query = q(&m, "a b c", (1, 2));
        let stale = Candidate::new(m.tokenize("a b c").unwrap(), (1, 2), vec![1.0, 1.0], false).unwrap();
        let fresh = recompute_confidence(&stale, &query, &m).unwrap();
        assert_eq!(fresh.tokens(), stale.tokens());
        assert_eq!(fresh.confidence(), &[1.0, 0.5]);
        assert_eq!(recompute_confidence(&fresh, &query, &m).unwrap(), fresh);
    }

    #[test]
    fn recompute_is_noop_for_context_free_provider() {
        // every length-2 sentence has the same second token distribution
        let m = lm(&["a c", "b c"]);
        let query = q(&m, "a c", (1, 1));
        let c = predict_independent(&query, &m).unwrap();
        assert_eq!(recompute_confidence(&c, &query, &m).unwrap(), c);
    }

    #[test]
    fn refine_rejects_mismatched_query() {
        let m = lm(&["a b c"]);
        let c = predict_independent(&q(&m, "a b c", (1, 2)), &m).unwrap();
        assert!(refine(&c, &q(&m, "a b c", (0, 2)), &m, RefineStrategy::Order, 3).is_err());
    }

    #[test]
    fn greedy_decode_matches_manual_pipeline() {
        let m = lm(&["a b c", "a c b", "a b d"]);
        let query = q(&m, "a b c", (1, 2));
        let cfg = DecoderConfig {
            init: InitStrategy::Independent,
            refine: RefineStrategy::Order,
            ..DecoderConfig::with_max_masks(2)
        };
        let init = predict_independent(&query, &m).unwrap();
        let manual = refine(&init, &query, &m, RefineStrategy::Order, 2).unwrap().candidate;
        assert_eq!(greedy_decode(&query, &m, &cfg).unwrap(), manual);
    }
}
