//! Frame types and their exact JSON layout.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BridgeError;

pub const PROTOCOL_VERSION: u64 = 1;

/// One request frame; the id is assigned by the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Vocab,
    Tokenize { text: String },
    Detokenize { ids: Vec<u32> },
    Predict { tokens: Vec<u32>, mask_positions: Vec<usize>, top_k: usize },
    Close,
}

impl Request {
    pub fn op(&self) -> &'static str {
        match self {
            Request::Vocab => "vocab",
            Request::Tokenize { .. } => "tokenize",
            Request::Detokenize { .. } => "detokenize",
            Request::Predict { .. } => "predict",
            Request::Close => "close",
        }
    }
}

#[derive(Serialize)]
pub(crate) struct Framed<'a> {
    pub id: u64,
    #[serde(flatten)]
    pub request: &'a Request,
}

pub(crate) fn encode(id: u64, request: &Request) -> String {
    let mut line = serde_json::to_string(&Framed { id, request }).expect("request frames always serialize");
    line.push('\n');
    line
}

/// Handshake reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub vocab_size: usize,
    pub mask_id: u32,
    pub protocol: u64,
    /// Largest top_k the backend will honour, if it caps requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k_cap: Option<usize>,
}

/// A parsed response frame: its id and either a result or a backend error.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Response {
    pub id: u64,
    pub body: Result<Value, (String, String)>,
}

pub(crate) fn decode(line: &str) -> Result<Response, BridgeError> {
    let value: Value = serde_json::from_str(line).map_err(|e| BridgeError::protocol(line, format!("not JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(BridgeError::protocol(line, "frame is not a JSON object"));
    };
    let id = obj.get("id").and_then(Value::as_u64).ok_or_else(|| BridgeError::protocol(line, "missing integer id"))?;
    let body = match (obj.remove("result"), obj.remove("error")) {
        (Some(r), None) => Ok(r),
        (None, Some(Value::Object(e))) => {
            let code = e.get("code").and_then(Value::as_str);
            let message = e.get("message").and_then(Value::as_str).unwrap_or("");
            match code {
                Some(code) => Err((code.to_string(), message.to_string())),
                None => return Err(BridgeError::protocol(line, "error frame without a code")),
            }
        }
        (None, Some(_)) => return Err(BridgeError::protocol(line, "error is not an object")),
        (Some(_), Some(_)) => return Err(BridgeError::protocol(line, "frame has both result and error")),
        (None, None) => return Err(BridgeError::protocol(line, "frame has neither result nor error")),
    };
    Ok(Response { id, body })
}
