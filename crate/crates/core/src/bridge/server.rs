//! Serves any `DistributionProvider` over the bridge protocol.

use std::io::{BufRead, Write};

use serde::Serialize;
use serde_json::{json, Value};

use super::wire::{BackendInfo, Request};
use crate::domain::{DistributionProvider, ProviderError, Slot, TokenId};

#[derive(Serialize)]
struct Reply<'a> {
    id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<&'a Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<ErrorBody<'a>>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

type Outcome = Result<Value, (&'static str, String)>;

fn provider_error(e: ProviderError) -> (&'static str, String) {
    let code = match e {
        ProviderError::UnknownToken(_) | ProviderError::UnknownId(_) | ProviderError::NoMask => "BAD_REQUEST",
        _ => "BACKEND",
    };
    (code, e.to_string())
}

fn handle<P: DistributionProvider + ?Sized>(p: &P, info: &BackendInfo, req: Request) -> Outcome {
    match req {
        Request::Vocab => Ok(serde_json::to_value(info).expect("info serializes")),
        Request::Tokenize { text } => {
            let ids = p.tokenize(&text).map_err(provider_error)?;
            Ok(json!({ "ids": ids }))
        }
        Request::Detokenize { ids } => {
            let ids: Vec<TokenId> = ids.into_iter().map(TokenId).collect();
            Ok(json!({ "text": p.detokenize(&ids).map_err(provider_error)? }))
        }
        Request::Predict { tokens, mask_positions, top_k } => {
            let mut slots: Vec<Slot> = tokens.into_iter().map(|t| Slot::Token(TokenId(t))).collect();
            for &pos in &mask_positions {
                match slots.get_mut(pos) {
                    Some(s @ Slot::Token(_)) => *s = Slot::Mask,
                    Some(Slot::Mask) => return Err(("BAD_REQUEST", format!("mask position {pos} repeated"))),
                    None => return Err(("BAD_REQUEST", format!("mask position {pos} out of range"))),
                }
            }
            if mask_positions.is_empty() {
                return Err(("BAD_REQUEST", "no mask positions".into()));
            }
            let top_k = info.top_k_cap.map_or(top_k, |cap| top_k.min(cap));
            let lists = p.predict(&slots, top_k).map_err(provider_error)?;
            // provider answers in slot order; the request may list positions in any order
            let mut by_pos: Vec<usize> = mask_positions.clone();
            by_pos.sort_unstable();
            let dists: Vec<Value> = mask_positions
                .iter()
                .map(|pos| {
                    let k = by_pos.binary_search(pos).expect("position present");
                    let entries: Vec<Value> =
                        lists[k].iter().filter(|(_, lp)| lp.is_finite()).map(|(t, lp)| json!([t.0, lp])).collect();
                    Value::Array(entries)
                })
                .collect();
            Ok(json!({ "dists": dists }))
        }
        Request::Close => Ok(json!({})),
    }
}

/// Answers requests from `reader` until it ends or a close request arrives.
/// Malformed lines get an error frame (with a null id when none is readable)
/// and never stop the loop.
pub fn serve<P, R, W>(p: &P, info: BackendInfo, reader: R, mut writer: W) -> std::io::Result<()>
where
    P: DistributionProvider + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Option<Value> = serde_json::from_str(&line).ok();
        let id = value.as_ref().and_then(|v| v.get("id")).and_then(Value::as_u64);
        let op = value.as_ref().and_then(|v| v.get("op")).and_then(Value::as_str).map(str::to_string);
        let mut closing = false;
        let outcome: Outcome = match (value, op.as_deref()) {
            (None, _) => Err(("BAD_REQUEST", "line is not JSON".into())),
            (Some(_), None) => Err(("BAD_REQUEST", "missing op".into())),
            (Some(_), Some(op)) if !["vocab", "tokenize", "detokenize", "predict", "close"].contains(&op) => {
                Err(("UNSUPPORTED", format!("unknown op {op:?}")))
            }
            (Some(_), Some(_)) if id.is_none() => Err(("BAD_REQUEST", "missing integer id".into())),
            (Some(v), Some(_)) => match serde_json::from_value::<Request>(v) {
                Ok(req) => {
                    closing = req == Request::Close;
                    handle(p, &info, req)
                }
                Err(e) => Err(("BAD_REQUEST", e.to_string())),
            },
        };
        let reply = match &outcome {
            Ok(v) => Reply { id, result: Some(v), error: None },
            Err((code, message)) => Reply { id, result: None, error: Some(ErrorBody { code, message }) },
        };
        serde_json::to_writer(&mut writer, &reply)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if closing {
            break;
        }
    }
    Ok(())
}
