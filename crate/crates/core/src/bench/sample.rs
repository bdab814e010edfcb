//! Frequency-proportional sampling without replacement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::Fact;

/// Draws `n` facts one at a time, each with probability proportional to its
/// frequency among those not yet drawn. When every remaining frequency is
/// zero the draw is uniform. Asking for more facts than exist returns the
/// whole population in sampled order.
pub fn sample_facts(facts: &[Fact], n: usize, seed: u64) -> Vec<Fact> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<&Fact> = facts.iter().collect();
    let mut out = Vec::with_capacity(n.min(pool.len()));
    while out.len() < n && !pool.is_empty() {
        let i = draw_index(&mut rng, pool.iter().map(|f| f.frequency));
        out.push(pool.remove(i).clone());
    }
    out
}

/// Index drawn proportionally to `weights`, uniformly if they sum to zero.
pub(crate) fn draw_index<R: Rng>(rng: &mut R, weights: impl Iterator<Item = u64> + Clone) -> usize {
    let total: u128 = weights.clone().map(u128::from).sum();
    if total == 0 {
        return rng.gen_range(0..weights.count());
    }
    let mut r = rng.gen_range(0..total);
    for (i, w) in weights.enumerate() {
        let w = u128::from(w);
        if r < w {
            return i;
        }
        r -= w;
    }
    unreachable!("draw below total weight")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pop(freqs: &[u64]) -> Vec<Fact> {
        freqs.iter().enumerate().map(|(i, &f)| Fact::new("P1", &format!("Q{i}"), &["Q99"], f)).collect()
    }

    #[test]
    fn three_to_one() {
        let facts = pop(&[3, 1]);
        let hits = (0..10_000u64).filter(|&s| sample_facts(&facts, 1, s)[0].subject_id == "Q0").count();
        let share = hits as f64 / 10_000.0;
        assert!((share - 0.75).abs() <= 0.015, "{share}");
    }

    #[test]
    fn exhaustion_returns_everything() {
        let facts = pop(&[5, 0, 2, 1]);
        let s = sample_facts(&facts, 10, 42);
        assert_eq!(s.len(), 4);
        assert_eq!(s, sample_facts(&facts, 10, 42));
        // zero-frequency facts only come out after the weighted ones
        assert_eq!(s[3].subject_id, "Q1");
    }

    #[test]
    fn zero_total_is_uniform() {
        let facts = pop(&[0, 0, 0, 0]);
        let mut counts = [0usize; 4];
        for seed in 0..8000 {
            let s = &sample_facts(&facts, 1, seed)[0].subject_id;
            counts[s[1..].parse::<usize>().unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (1800..=2200).contains(&c)), "{counts:?}");
    }

    #[test]
    fn frozen_draws() {
        // guards against silent changes to the RNG stream or the draw routine
        let facts = pop(&[3, 1, 4, 1, 5, 9, 2, 6]);
        let ids: Vec<String> = sample_facts(&facts, 8, 2020).into_iter().map(|f| f.subject_id).collect();
        assert_eq!(ids, FROZEN_2020);
    }

    const FROZEN_2020: [&str; 8] = ["Q6", "Q7", "Q5", "Q0", "Q4", "Q2", "Q3", "Q1"];

    proptest! {
        #[test]
        fn sample_is_a_distinct_subset(freqs in prop::collection::vec(0u64..20, 0..12), n in 1usize..15, seed: u64) {
            let facts = pop(&freqs);
            let s = sample_facts(&facts, n, seed);
            prop_assert_eq!(s.len(), n.min(facts.len()));
            let ids: std::collections::BTreeSet<_> = s.iter().map(|f| f.subject_id.clone()).collect();
            prop_assert_eq!(ids.len(), s.len());
            prop_assert_eq!(&s, &sample_facts(&facts, n, seed));
        }
    }
}
