//! Running one fact: instantiate the prompt, decode, and record the outcome.

use std::collections::BTreeMap;

use super::data::{Entities, Fact};
use super::metrics::RunRecord;
use super::BenchError;
use crate::decoder::{decode, DecodeError};
use crate::domain::{DecoderConfig, DistributionProvider, MaskedQuery};
use crate::prompt::{instantiate_parts, PromptError, PromptTemplate};

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub decoder: DecoderConfig,
}

/// Decodes the object slot of `template` for `fact`. Facts the data cannot
/// support in the template's language (no subject label, no gold alias, an
/// inflected form or gender the template needs but the entity lacks) come
/// back as skipped records rather than errors.
pub fn run_fact<P: DistributionProvider + ?Sized>(
    p: &P,
    template: &PromptTemplate,
    fact: &Fact,
    entities: &Entities,
    opts: &RunOptions,
) -> Result<RunRecord, BenchError> {
    let lang = template.language.as_str();
    let subject = entities.get(&fact.subject_id).ok_or_else(|| BenchError::UnknownEntity(fact.subject_id.clone()))?;
    let mut gold_surfaces = Vec::new();
    for id in &fact.object_ids {
        let e = entities.get(id).ok_or_else(|| BenchError::UnknownEntity(id.clone()))?;
        if let Some(s) = e.label(lang).or_else(|| e.aliases_in(lang).first().map(String::as_str)) {
            gold_surfaces.push(s.to_string());
        }
    }
    if gold_surfaces.is_empty() {
        return Ok(RunRecord::skipped(fact.clone(), lang, format!("no gold object has an alias in {lang}")));
    }
    let Some(form) = subject.entity_form(lang) else {
        return Ok(RunRecord::skipped(fact.clone(), lang, format!("subject has no label in {lang}")));
    };
    let parts = match instantiate_parts(template, &form) {
        Ok(parts) => parts,
        Err(
            e @ (PromptError::AmbiguousFeatures { .. }
            | PromptError::NoBranchMatches { .. }
            | PromptError::MissingSurfaceForm { .. }),
        ) => return Ok(RunRecord::skipped(fact.clone(), lang, e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let prefix = p.tokenize(&parts.prefix)?;
    let suffix = p.tokenize(&parts.suffix)?;
    let result = decode(
        |m| MaskedQuery::with_masks(&prefix, m, &suffix, lang).map_err(|e| DecodeError::Query(m, e.to_string())),
        p,
        &opts.decoder,
    )?;

    let mut per_m_predictions = BTreeMap::new();
    let mut per_m_scores = BTreeMap::new();
    for (&m, cand) in &result.per_m {
        per_m_predictions.insert(m, p.detokenize(cand.filled())?);
        per_m_scores.insert(m, cand.score());
    }
    let mut gold_mask_counts = Vec::new();
    for s in &gold_surfaces {
        gold_mask_counts.push(p.tokenize(s)?.len());
    }
    gold_mask_counts.sort_unstable();
    gold_mask_counts.dedup();
    let mask_count_used = result.best_mask_count();
    Ok(RunRecord {
        fact: fact.clone(),
        language: lang.to_string(),
        prediction_text: per_m_predictions[&mask_count_used].clone(),
        mask_count_used,
        per_m_scores,
        per_m_predictions,
        gold_is_single_token: gold_mask_counts.first() == Some(&1),
        gold_mask_counts,
        skipped: None,
    })
}
