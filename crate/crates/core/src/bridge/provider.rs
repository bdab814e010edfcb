//! `DistributionProvider` backed by a bridge session.

use std::sync::Mutex;

use serde_json::Value;

use super::cache::ResponseCache;
use super::session::Session;
use super::wire::{BackendInfo, Request};
use super::BridgeError;
use crate::domain::{sort_ranked, DistributionProvider, ProviderError, Ranked, Slot, TokenId};

/// Remote provider. Calls are serialized on one session; open several
/// providers for parallel work.
#[derive(Debug)]
pub struct BridgeProvider {
    session: Mutex<Session>,
    info: BackendInfo,
    cache: Option<ResponseCache>,
}

fn bad(result: &Value, reason: impl Into<String>) -> ProviderError {
    BridgeError::protocol(&result.to_string(), reason).into()
}

impl BridgeProvider {
    pub fn new(session: Session, cache: Option<ResponseCache>) -> Self {
        Self { info: session.info(), session: Mutex::new(session), cache }
    }

    pub fn info(&self) -> BackendInfo {
        self.info
    }

    pub fn close(self) -> Result<(), BridgeError> {
        self.session.into_inner().unwrap_or_else(|p| p.into_inner()).close()
    }

    fn run(&self, requests: &[Request]) -> Result<Vec<Value>, ProviderError> {
        let mut out: Vec<Option<Value>> = match &self.cache {
            Some(c) => requests.iter().map(|r| c.get(r)).collect(),
            None => vec![None; requests.len()],
        };
        let missing: Vec<usize> = (0..requests.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let todo: Vec<Request> = missing.iter().map(|&i| requests[i].clone()).collect();
            let results = self.session.lock().unwrap_or_else(|p| p.into_inner()).call_all(&todo)?;
            for (&i, v) in missing.iter().zip(results) {
                if let Some(c) = &self.cache {
                    c.put(&requests[i], &v);
                }
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }

    fn predict_request(&self, slots: &[Slot], top_k: usize) -> Result<Request, ProviderError> {
        let mut tokens = Vec::with_capacity(slots.len());
        let mut mask_positions = Vec::new();
        for (i, s) in slots.iter().enumerate() {
            match s {
                Slot::Token(t) => tokens.push(t.0),
                Slot::Mask => {
                    tokens.push(self.info.mask_id);
                    mask_positions.push(i);
                }
            }
        }
        if mask_positions.is_empty() {
            return Err(ProviderError::NoMask);
        }
        let top_k = self.info.top_k_cap.map_or(top_k, |cap| top_k.min(cap));
        Ok(Request::Predict { tokens, mask_positions, top_k })
    }

    /// Checks one reply against the protocol contract and brings it into the
    /// provider's canonical form: ties ordered by id, at most `top_k` entries,
    /// and, when the whole vocabulary was requested, every missing token
    /// listed at probability zero.
    fn parse_dists(&self, result: &Value, masks: usize, top_k: usize) -> Result<Vec<Ranked>, ProviderError> {
        let dists = result.get("dists").and_then(Value::as_array).ok_or_else(|| bad(result, "missing dists"))?;
        if dists.len() != masks {
            return Err(bad(result, format!("{} lists for {masks} masks", dists.len())));
        }
        let vocab = self.info.vocab_size;
        let mut out = Vec::with_capacity(masks);
        for list in dists {
            let list = list.as_array().ok_or_else(|| bad(result, "distribution is not a list"))?;
            let mut ranked: Ranked = Vec::with_capacity(list.len());
            let mut seen = std::collections::HashSet::new();
            for pair in list {
                let (id, lp) = match pair.as_array().map(Vec::as_slice) {
                    Some([id, lp]) => (id.as_u64(), lp.as_f64()),
                    _ => (None, None),
                };
                let (Some(id), Some(lp)) = (id, lp) else {
                    return Err(bad(result, format!("bad entry {pair}")));
                };
                if id >= vocab as u64 {
                    return Err(bad(result, format!("token id {id} outside vocabulary of {vocab}")));
                }
                if lp > 0.0 || lp.is_nan() {
                    return Err(bad(result, format!("logprob {lp} is not <= 0")));
                }
                if ranked.last().is_some_and(|&(_, prev)| lp > prev) {
                    return Err(bad(result, "distribution is not sorted by descending logprob"));
                }
                if !seen.insert(id) {
                    return Err(bad(result, format!("token id {id} listed twice")));
                }
                ranked.push((TokenId(id as u32), lp));
            }
            sort_ranked(&mut ranked);
            ranked.truncate(top_k);
            let requested = self.info.top_k_cap.map_or(top_k, |cap| top_k.min(cap));
            if requested >= vocab && ranked.len() < vocab {
                ranked.extend(
                    (0..vocab as u32).filter(|i| !seen.contains(&(*i as u64))).map(|i| (TokenId(i), f64::NEG_INFINITY)),
                );
            }
            out.push(ranked);
        }
        Ok(out)
    }
}

impl DistributionProvider for BridgeProvider {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        let v = self.run(&[Request::Tokenize { text: text.into() }])?.remove(0);
        let ids = v.get("ids").and_then(Value::as_array).ok_or_else(|| bad(&v, "missing ids"))?;
        ids.iter()
            .map(|i| match i.as_u64() {
                Some(i) if i < self.info.vocab_size as u64 => Ok(TokenId(i as u32)),
                _ => Err(bad(&v, format!("bad token id {i}"))),
            })
            .collect()
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, ProviderError> {
        let v = self.run(&[Request::Detokenize { ids: ids.iter().map(|t| t.0).collect() }])?.remove(0);
        v.get("text").and_then(Value::as_str).map(str::to_string).ok_or_else(|| bad(&v, "missing text"))
    }

    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }

    fn predict(&self, slots: &[Slot], top_k: usize) -> Result<Vec<Ranked>, ProviderError> {
        Ok(self.predict_batch(&[slots.to_vec()], top_k)?.remove(0))
    }

    fn predict_batch(&self, queries: &[Vec<Slot>], top_k: usize) -> Result<Vec<Vec<Ranked>>, ProviderError> {
        let requests = queries.iter().map(|q| self.predict_request(q, top_k)).collect::<Result<Vec<_>, _>>()?;
        let results = self.run(&requests)?;
        queries
            .iter()
            .zip(&results)
            .map(|(q, r)| self.parse_dists(r, q.iter().filter(|s| s.is_mask()).count(), top_k))
            .collect()
    }
}
