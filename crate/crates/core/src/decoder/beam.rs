//! Beam search over initial prediction and refinement steps.
//!
//! Every step expands each live hypothesis into at most `B` children, pools
//! the children, removes duplicate fills (keeping the higher-scoring copy),
//! and keeps the top `B`. Because confidence-ordered steps may reach the same
//! fill along different paths, deduplication is keyed on the span contents
//! alone. When confidence recomputation is on it runs only on the survivors,
//! which keeps the work per step at `O(B * m)` provider calls.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use crate::domain::{
    Candidate, DecoderConfig, DistributionProvider, InitStrategy, MaskedQuery, RefineStrategy, Slot, TokenId,
};

use super::greedy::lowest_confidence;
use super::{check_shape, confidence_of, mask_rank, DecodeError, Partial};

/// One finished beam hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamItem {
    pub candidate: Candidate,
    /// Absolute positions filled by the decoder.
    pub predicted_set: BTreeSet<usize>,
    /// Whether refinement converged for this hypothesis.
    pub converged: bool,
}

#[derive(Debug, Clone)]
struct Hyp {
    state: Partial,
    converged: bool,
    cursor: usize,
    changed: bool,
    dirty: bool,
}

impl Hyp {
    fn score(&self) -> f64 {
        self.state.log_score()
    }

    fn key(&self) -> &[Slot] {
        self.state.span_slots()
    }

    fn advance(&mut self) {
        self.cursor += 1;
        if self.cursor == self.state.m() {
            if self.changed {
                self.cursor = 0;
                self.changed = false;
            } else {
                self.converged = true;
            }
        }
    }
}

fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.key().cmp(b.key()))
}

/// Beam decoding of a single mask count. Returns finished hypotheses sorted
/// by descending score (ties by ascending fill).
pub fn beam_decode<P: DistributionProvider + ?Sized>(
    q: &MaskedQuery,
    p: &P,
    cfg: &DecoderConfig,
) -> Result<Vec<BeamItem>, DecodeError> {
    cfg.validate().map_err(DecodeError::Config)?;
    let width = cfg.beam;
    let m = q.mask_count();
    let root = Hyp { state: Partial::new(q), converged: false, cursor: 0, changed: false, dirty: false };

    let mut beam = match cfg.init {
        InitStrategy::Independent => {
            let children = independent_children(&root, p, width)?;
            finish_step(children, p, width, cfg.recompute)?
        }
        InitStrategy::Order | InitStrategy::Confidence => {
            let mut beam = vec![root];
            for _ in 0..m {
                let mut pool = Vec::new();
                for h in &beam {
                    pool.extend(init_children(h, p, width, cfg.init)?);
                }
                beam = finish_step(pool, p, width, cfg.recompute)?;
            }
            beam
        }
    };

    if cfg.refine != RefineStrategy::None {
        let budget = cfg.max_iterations.saturating_sub(m);
        let mut used = 0;
        while used < budget && beam.iter().any(|h| !h.converged) {
            let mut pool = Vec::new();
            for h in beam {
                pool.extend(refine_children(h, p, width, cfg.refine)?);
            }
            beam = finish_step(pool, p, width, cfg.recompute)?;
            used += 1;
        }
    } else {
        beam.iter_mut().for_each(|h| h.converged = true);
    }

    let mut items = beam
        .into_iter()
        .map(|h| {
            let predicted_set = q.span_positions().collect();
            let converged = h.converged;
            h.state.into_candidate(cfg.length_norm).map(|candidate| BeamItem { candidate, predicted_set, converged })
        })
        .collect::<Result<Vec<_>, _>>()?;
    items.sort_by(|a, b| {
        b.candidate.score().total_cmp(&a.candidate.score()).then_with(|| a.candidate.filled().cmp(b.candidate.filled()))
    });
    Ok(items)
}

/// Deduplicates, keeps the best `width`, and refreshes confidences of
/// changed survivors when `recompute` is set.
fn finish_step<P: DistributionProvider + ?Sized>(
    pool: Vec<Hyp>,
    p: &P,
    width: usize,
    recompute: bool,
) -> Result<Vec<Hyp>, DecodeError> {
    let mut seen: HashMap<Vec<Slot>, usize> = HashMap::new();
    let mut uniq: Vec<Hyp> = Vec::with_capacity(pool.len());
    for h in pool {
        match seen.get(h.key()) {
            Some(&i) => {
                if h.score() > uniq[i].score() {
                    uniq[i] = h;
                }
            }
            None => {
                seen.insert(h.key().to_vec(), uniq.len());
                uniq.push(h);
            }
        }
    }
    uniq.sort_by(rank);
    uniq.truncate(width);
    if recompute {
        for h in uniq.iter_mut().filter(|h| h.dirty) {
            h.state.recompute(p)?;
            h.dirty = false;
        }
        uniq.sort_by(rank);
    }
    Ok(uniq)
}

/// Partial joint assignment: running log-probability, parent combo index,
/// entry index in the current list, and the picks so far.
type Expansion = (f64, usize, usize, Vec<(TokenId, f64)>);

fn independent_children<P: DistributionProvider + ?Sized>(
    root: &Hyp,
    p: &P,
    width: usize,
) -> Result<Vec<Hyp>, DecodeError> {
    let slots = &root.state.slots;
    let dists = p.predict(slots, width)?;
    check_shape(slots, dists.len())?;
    // k-best joint assignments; the score is separable, so pruning each
    // prefix to the top `width` is exact.
    let mut combos: Vec<(f64, Vec<(TokenId, f64)>)> = vec![(0.0, Vec::new())];
    for list in &dists {
        if list.is_empty() {
            return Err(DecodeError::EmptyDistribution);
        }
        let mut next: Vec<Expansion> = Vec::new();
        for (ci, (sum, picks)) in combos.iter().enumerate() {
            for (ei, &(tok, lp)) in list.iter().enumerate() {
                let mut picks = picks.clone();
                picks.push((tok, lp));
                next.push((sum + lp, ci, ei, picks));
            }
        }
        next.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        next.truncate(width);
        combos = next.into_iter().map(|(s, _, _, picks)| (s, picks)).collect();
    }
    let offsets = root.state.masked_offsets();
    Ok(combos
        .into_iter()
        .map(|(_, picks)| {
            let mut h = root.clone();
            for (&o, &(tok, lp)) in offsets.iter().zip(&picks) {
                h.state.set(o, tok, confidence_of(lp));
            }
            h.dirty = true;
            h
        })
        .collect())
}

fn init_children<P: DistributionProvider + ?Sized>(
    h: &Hyp,
    p: &P,
    width: usize,
    init: InitStrategy,
) -> Result<Vec<Hyp>, DecodeError> {
    let slots = &h.state.slots;
    let dists = p.predict(slots, width)?;
    check_shape(slots, dists.len())?;
    let masked = h.state.masked_offsets();
    let mut options: Vec<(usize, TokenId, f64)> = Vec::new();
    match init {
        InitStrategy::Order => {
            let list = dists.first().filter(|l| !l.is_empty()).ok_or(DecodeError::EmptyDistribution)?;
            options.extend(list.iter().map(|&(t, lp)| (masked[0], t, lp)));
        }
        _ => {
            for (&o, list) in masked.iter().zip(&dists) {
                if list.is_empty() {
                    return Err(DecodeError::EmptyDistribution);
                }
                options.extend(list.iter().map(|&(t, lp)| (o, t, lp)));
            }
            // stable: equal probabilities keep (position, provider) order
            options.sort_by(|a, b| b.2.total_cmp(&a.2));
        }
    }
    options.truncate(width);
    Ok(options
        .into_iter()
        .map(|(o, tok, lp)| {
            let mut child = h.clone();
            child.state.set(o, tok, confidence_of(lp));
            child.dirty = true;
            child
        })
        .collect())
}

fn refine_children<P: DistributionProvider + ?Sized>(
    mut h: Hyp,
    p: &P,
    width: usize,
    strategy: RefineStrategy,
) -> Result<Vec<Hyp>, DecodeError> {
    if h.converged {
        return Ok(vec![h]);
    }
    let offset = match strategy {
        RefineStrategy::Confidence => lowest_confidence(&h.state.conf),
        RefineStrategy::Order => h.cursor,
        RefineStrategy::None => return Ok(vec![h]),
    };
    let slots = h.state.with_masked(offset);
    let dists = p.predict(&slots, width)?;
    check_shape(&slots, dists.len())?;
    let list = &dists[mask_rank(&slots, h.state.start + offset)];
    let incumbent = h.state.token_at(offset);
    let &(top, _) = list.first().ok_or(DecodeError::EmptyDistribution)?;

    if Some(top) == incumbent {
        match strategy {
            RefineStrategy::Confidence => h.converged = true,
            _ => h.advance(),
        }
        return Ok(vec![h]);
    }
    Ok(list
        .iter()
        .take(width)
        .map(|&(tok, lp)| {
            let mut child = h.clone();
            if Some(tok) != incumbent {
                child.state.set(offset, tok, confidence_of(lp));
                child.changed = true;
                child.dirty = true;
            }
            if strategy == RefineStrategy::Order {
                child.advance();
            }
            child
        })
        .collect())
}
