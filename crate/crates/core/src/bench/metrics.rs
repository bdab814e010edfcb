//! Prediction matching and accuracy aggregation.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::data::{Entities, Fact};
use super::BenchError;

/// Lowercases and collapses whitespace runs to single spaces.
pub fn normalize_surface(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// True iff the prediction equals an alias of some gold object in `language`,
/// ignoring case and whitespace differences.
pub fn match_prediction(
    prediction: &str,
    fact: &Fact,
    entities: &Entities,
    language: &str,
) -> Result<bool, BenchError> {
    match_in_languages(prediction, fact, entities, &[language])
}

/// Like [`match_prediction`], accepting aliases from any of `languages`.
pub fn match_in_languages(
    prediction: &str,
    fact: &Fact,
    entities: &Entities,
    languages: &[&str],
) -> Result<bool, BenchError> {
    let pred = normalize_surface(prediction);
    let mut hit = false;
    for id in &fact.object_ids {
        let e = entities.get(id).ok_or_else(|| BenchError::UnknownEntity(id.clone()))?;
        hit |=
            !pred.is_empty() && languages.iter().any(|l| e.aliases_in(l).iter().any(|a| normalize_surface(a) == pred));
    }
    Ok(hit)
}

/// Outcome of running one fact through the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fact: Fact,
    pub language: String,
    pub prediction_text: String,
    pub mask_count_used: usize,
    pub per_m_scores: BTreeMap<usize, f64>,
    /// Detokenized best fill for every tried mask count.
    #[serde(default)]
    pub per_m_predictions: BTreeMap<usize, String>,
    /// Token counts of the gold objects' canonical labels under the active tokenizer.
    #[serde(default)]
    pub gold_mask_counts: Vec<usize>,
    pub gold_is_single_token: bool,
    /// Why the fact was not evaluated, if it was not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl RunRecord {
    pub fn skipped(fact: Fact, language: &str, reason: impl Into<String>) -> Self {
        Self {
            fact,
            language: language.into(),
            prediction_text: String::new(),
            mask_count_used: 0,
            per_m_scores: BTreeMap::new(),
            per_m_predictions: BTreeMap::new(),
            gold_mask_counts: Vec::new(),
            gold_is_single_token: false,
            skipped: Some(reason.into()),
        }
    }

    fn is_correct(&self, entities: &Entities, oracle_length: bool, languages: &[&str]) -> Result<bool, BenchError> {
        if match_in_languages(&self.prediction_text, &self.fact, entities, languages)? {
            // a correct prediction already has a correct length
            return Ok(true);
        }
        if !oracle_length {
            return Ok(false);
        }
        for m in &self.gold_mask_counts {
            if let Some(pred) = self.per_m_predictions.get(m) {
                if match_in_languages(pred, &self.fact, entities, languages)? {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}

/// Exact fraction, serialized with a float rendering for convenience.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ratio(pub BigRational);

impl Ratio {
    pub fn new(num: usize, den: usize) -> Self {
        Self(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Ratio", 3)?;
        st.serialize_field("numerator", &self.0.numer().to_string())?;
        st.serialize_field("denominator", &self.0.denom().to_string())?;
        st.serialize_field("value", &self.to_f64())?;
        st.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelationScore {
    pub correct: usize,
    pub evaluated: usize,
    pub accuracy: Ratio,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    pub per_relation: BTreeMap<String, RelationScore>,
    /// `None` when no relation has an evaluated fact.
    pub macro_average: Option<Ratio>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Splits {
    pub all: SplitReport,
    pub single: SplitReport,
    pub multi: SplitReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvaluationReport {
    pub per_relation_accuracy: BTreeMap<String, Ratio>,
    pub macro_average: Option<Ratio>,
    pub splits: Splits,
    pub skipped_count: usize,
    pub oracle_length: bool,
}

fn split_report(outcomes: &[(&RunRecord, bool)], keep: impl Fn(&RunRecord) -> bool) -> SplitReport {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, ok) in outcomes.iter().filter(|(r, _)| keep(r)) {
        let t = tally.entry(r.fact.relation_id.clone()).or_default();
        t.0 += usize::from(*ok);
        t.1 += 1;
    }
    let per_relation: BTreeMap<String, RelationScore> = tally
        .into_iter()
        .map(|(rel, (correct, evaluated))| {
            (rel, RelationScore { correct, evaluated, accuracy: Ratio::new(correct, evaluated) })
        })
        .collect();
    let macro_average = (!per_relation.is_empty()).then(|| {
        let sum = per_relation.values().fold(BigRational::zero(), |acc, s| acc + &s.accuracy.0);
        Ratio(sum / BigRational::from_integer(BigInt::from(per_relation.len())))
    });
    SplitReport { per_relation, macro_average }
}

/// Per-relation and macro-averaged accuracy over the evaluated records.
/// Predictions are matched against aliases in the record's own language.
pub fn evaluate(
    records: &[RunRecord],
    entities: &Entities,
    oracle_length: bool,
) -> Result<EvaluationReport, BenchError> {
    evaluate_with(records, entities, oracle_length, &[])
}

/// As [`evaluate`], additionally accepting aliases in `extra_languages`.
pub fn evaluate_with(
    records: &[RunRecord],
    entities: &Entities,
    oracle_length: bool,
    extra_languages: &[&str],
) -> Result<EvaluationReport, BenchError> {
    let mut outcomes = Vec::with_capacity(records.len());
    let mut skipped_count = 0;
    for r in records {
        if r.skipped.is_some() {
            skipped_count += 1;
            continue;
        }
        let mut langs = vec![r.language.as_str()];
        langs.extend(extra_languages.iter().copied().filter(|l| *l != r.language));
        outcomes.push((r, r.is_correct(entities, oracle_length, &langs)?));
    }
    let all = split_report(&outcomes, |_| true);
    let single = split_report(&outcomes, |r| r.gold_is_single_token);
    let multi = split_report(&outcomes, |r| !r.gold_is_single_token);
    Ok(EvaluationReport {
        per_relation_accuracy: all.per_relation.iter().map(|(k, v)| (k.clone(), v.accuracy.clone())).collect(),
        macro_average: all.macro_average.clone(),
        splits: Splits { all, single, multi },
        skipped_count,
        oracle_length,
    })
}

/// Flat per-relation table: one header row, then one row per relation.
pub fn report_tsv(report: &EvaluationReport) -> String {
    let mut out = String::from(
        "relation\tevaluated\tcorrect\taccuracy\tsingle_evaluated\tsingle_correct\tmulti_evaluated\tmulti_correct\n",
    );
    let pair =
        |split: &SplitReport, rel: &str| split.per_relation.get(rel).map_or((0, 0), |s| (s.evaluated, s.correct));
    for (rel, s) in &report.splits.all.per_relation {
        let (se, sc) = pair(&report.splits.single, rel);
        let (me, mc) = pair(&report.splits.multi, rel);
        out.push_str(&format!(
            "{rel}\t{}\t{}\t{:.6}\t{se}\t{sc}\t{me}\t{mc}\n",
            s.evaluated,
            s.correct,
            s.accuracy.to_f64()
        ));
    }
    if let Some(m) = &report.macro_average {
        out.push_str(&format!("MACRO\t\t\t{:.6}\t\t\t\t\n", m.to_f64()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::data::EntityRecord;
    use proptest::prelude::*;

    fn entities() -> Entities {
        [
            EntityRecord::new("Q60").with_label("es", "Nueva York").with_aliases("es", &["NYC"]),
            EntityRecord::new("Q183").with_label("en", "Germany").with_aliases("en", &["Deutschland"]),
            EntityRecord::new("Q142").with_label("en", "France"),
            EntityRecord::new("Q16").with_label("en", "Canada"),
        ]
        .into_iter()
        .map(|e| (e.entity_id.clone(), e))
        .collect()
    }

    fn record(rel: &str, subj: &str, obj: &str, pred: &str, single: bool) -> RunRecord {
        RunRecord {
            fact: Fact::new(rel, subj, &[obj], 1),
            language: "en".into(),
            prediction_text: pred.into(),
            mask_count_used: 1,
            per_m_scores: BTreeMap::from([(1, -1.0)]),
            per_m_predictions: BTreeMap::from([(1, pred.into())]),
            gold_mask_counts: vec![1],
            gold_is_single_token: single,
            skipped: None,
        }
    }

    #[test]
    fn matching_rules() {
        let ents = entities();
        let ny = Fact::new("P19", "Q1", &["Q60"], 1);
        assert!(match_prediction("nueva york", &ny, &ents, "es").unwrap());
        assert!(match_prediction("  NUEVA\t york ", &ny, &ents, "es").unwrap());
        assert!(!match_prediction("nueva york", &ny, &ents, "en").unwrap());
        assert!(!match_prediction("", &ny, &ents, "es").unwrap());
        let de = Fact::new("P17", "Q1", &["Q183"], 1);
        assert!(!match_prediction("the Federal Republic of Germany", &de, &ents, "en").unwrap());
        let multi = Fact::new("P530", "Q30", &["Q142", "Q16"], 1);
        assert!(match_prediction("canada", &multi, &ents, "en").unwrap());
        assert!(match_prediction("France", &multi, &ents, "en").unwrap());
        let bad = Fact::new("P1", "Q1", &["Q404"], 1);
        assert!(matches!(match_prediction("x", &bad, &ents, "en"), Err(BenchError::UnknownEntity(id)) if id == "Q404"));
        assert!(match_in_languages("germany", &de, &ents, &["es", "en"]).unwrap());
    }

    #[test]
    fn macro_of_half_and_quarter() {
        let ents = entities();
        let mut rs = vec![record("P1", "a", "Q142", "France", true), record("P1", "b", "Q142", "Canada", true)];
        rs.push(record("P2", "c", "Q16", "Canada", false));
        for s in ["d", "e", "f"] {
            rs.push(record("P2", s, "Q16", "France", false));
        }
        let rep = evaluate(&rs, &ents, false).unwrap();
        assert_eq!(rep.per_relation_accuracy["P1"], Ratio::new(1, 2));
        assert_eq!(rep.per_relation_accuracy["P2"], Ratio::new(1, 4));
        assert_eq!(rep.macro_average, Some(Ratio::new(3, 8)));
        assert_eq!(rep.splits.single.macro_average, Some(Ratio::new(1, 2)));
        assert_eq!(rep.splits.multi.macro_average, Some(Ratio::new(1, 4)));
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["macro_average"]["value"], 0.375);
        assert_eq!(json["macro_average"]["numerator"], "3");
    }

    #[test]
    fn fully_skipped_relation_is_excluded() {
        let ents = entities();
        let rs = vec![
            record("P1", "a", "Q142", "France", true),
            RunRecord::skipped(Fact::new("P2", "b", &["Q16"], 1), "en", "no alias"),
        ];
        let rep = evaluate(&rs, &ents, false).unwrap();
        assert_eq!(rep.skipped_count, 1);
        assert!(!rep.per_relation_accuracy.contains_key("P2"));
        assert_eq!(rep.macro_average, Some(Ratio::new(1, 1)));
        assert!(evaluate(&[], &ents, false).unwrap().macro_average.is_none());
    }

    #[test]
    fn oracle_length_uses_gold_count_candidate() {
        let ents = entities();
        let mut r = record("P1", "a", "Q142", "Canada", true);
        r.mask_count_used = 1;
        r.per_m_predictions = BTreeMap::from([(1, "Canada".into()), (2, "France".into())]);
        r.gold_mask_counts = vec![2];
        let plain = evaluate(std::slice::from_ref(&r), &ents, false).unwrap();
        let oracle = evaluate(&[r], &ents, true).unwrap();
        assert_eq!(plain.macro_average, Some(Ratio::new(0, 1)));
        assert_eq!(oracle.macro_average, Some(Ratio::new(1, 1)));
    }

    #[test]
    fn tsv_has_a_row_per_relation() {
        let ents = entities();
        let rs = vec![record("P1", "a", "Q142", "France", true), record("P2", "b", "Q16", "x", false)];
        let tsv = report_tsv(&evaluate(&rs, &ents, false).unwrap());
        let rows: Vec<&str> = tsv.lines().collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1], "P1\t1\t1\t1.000000\t1\t1\t0\t0");
        assert!(rows[3].starts_with("MACRO\t\t\t0.500000"));
    }

    fn arb_record() -> impl Strategy<Value = RunRecord> {
        let surf = prop::sample::select(vec!["France", "Canada", "Germany", "", "NYC"]);
        (
            prop::sample::select(vec!["P1", "P2", "P3"]),
            prop::sample::select(vec!["Q142", "Q16", "Q183"]),
            prop::collection::btree_map(1usize..5, surf.clone(), 1..5),
            prop::collection::vec(1usize..5, 0..3),
            any::<bool>(),
            prop::option::of(Just("skip".to_string())),
            0usize..4,
        )
            .prop_map(|(rel, obj, preds, gold, single, skipped, pick)| {
                let keys: Vec<usize> = preds.keys().copied().collect();
                let m = keys[pick % keys.len()];
                RunRecord {
                    fact: Fact::new(rel, "s", &[obj], 1),
                    language: "en".into(),
                    prediction_text: preds[&m].to_string(),
                    mask_count_used: m,
                    per_m_scores: keys.iter().map(|&k| (k, -(k as f64))).collect(),
                    per_m_predictions: preds.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
                    gold_mask_counts: gold,
                    gold_is_single_token: single,
                    skipped,
                }
            })
    }

    proptest! {
        #[test]
        fn oracle_never_lowers_accuracy(rs in prop::collection::vec(arb_record(), 0..20)) {
            let ents = entities();
            let plain = evaluate(&rs, &ents, false).unwrap();
            let oracle = evaluate(&rs, &ents, true).unwrap();
            for (rel, acc) in &plain.per_relation_accuracy {
                prop_assert!(oracle.per_relation_accuracy[rel].0 >= acc.0);
            }
            prop_assert_eq!(plain.macro_average.is_some(), oracle.macro_average.is_some());
            if let (Some(p), Some(o)) = (plain.macro_average, oracle.macro_average) {
                prop_assert!(o.0 >= p.0);
            }
        }

        #[test]
        fn macro_ignores_record_order(mut rs in prop::collection::vec(arb_record(), 0..20), seed: u64) {
            let ents = entities();
            let a = evaluate(&rs, &ents, false).unwrap();
            use rand::seq::SliceRandom;
            rs.shuffle(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
            prop_assert_eq!(a, evaluate(&rs, &ents, false).unwrap());
        }

        #[test]
        fn matching_ignores_case_and_alias_order(upper: bool, rev: bool) {
            let mut aliases = vec!["Nueva York", "NYC", "la Gran Manzana"];
            if rev {
                aliases.reverse();
            }
            let e = EntityRecord::new("Q60").with_aliases("es", &aliases);
            let ents: Entities = [("Q60".to_string(), e)].into_iter().collect();
            let f = Fact::new("P1", "Q1", &["Q60"], 1);
            let pred = if upper { "LA GRAN MANZANA" } else { "la gran manzana" };
            prop_assert!(match_prediction(pred, &f, &ents, "es").unwrap());
        }
    }
}
