//! Line-delimited JSON bridge to external model backends.
//!
//! Each request and response is one JSON object on one line:
//!
//! ```text
//! → {"id":1,"op":"vocab"}
//! ← {"id":1,"result":{"vocab_size":119547,"mask_id":103,"protocol":1}}
//! → {"id":3,"op":"predict","tokens":[...],"mask_positions":[5,6],"top_k":10}
//! ← {"id":3,"result":{"dists":[[[1037,-0.61],...],[[2003,-0.9],...]]}}
//! ← {"id":3,"error":{"code":"OOM","message":"..."}}
//! ```
//!
//! Logprobs travel on the wire; tokens of probability zero are left out of
//! the lists. Backends may answer pipelined requests in any order.

mod cache;
mod provider;
mod server;
mod session;
mod wire;

use thiserror::Error;

pub use cache::ResponseCache;
pub use provider::BridgeProvider;
pub use server::serve;
pub use session::{Session, SessionOptions, Transport};
pub use wire::{BackendInfo, Request, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error("cannot start backend: {0}")]
    SpawnFailure(String),
    #[error("backend did not answer the handshake within {0:?}")]
    HandshakeTimeout(std::time::Duration),
    #[error("backend speaks protocol {got}, expected {expected}")]
    ProtocolVersionMismatch { expected: u64, got: u64 },
    #[error("protocol error ({reason}) on line: {line}")]
    Protocol { line: String, reason: String },
    #[error("backend error {code}: {message}")]
    Backend { code: String, message: String },
    #[error("no response to {op} within {timeout:?}")]
    Timeout { op: String, timeout: std::time::Duration },
    #[error("session closed: {0}")]
    SessionClosed(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl BridgeError {
    pub(crate) fn protocol(line: &str, reason: impl Into<String>) -> Self {
        const MAX: usize = 200;
        let line = if line.len() > MAX {
            let mut end = MAX;
            while !line.is_char_boundary(end) {
                end -= 1;
            }
            format!("{}…", &line[..end])
        } else {
            line.to_string()
        };
        BridgeError::Protocol { line, reason: reason.into() }
    }
}

impl From<BridgeError> for crate::domain::ProviderError {
    fn from(e: BridgeError) -> Self {
        use crate::domain::ProviderError;
        match e {
            BridgeError::Backend { code, message } => ProviderError::Backend { code, message },
            e @ (BridgeError::Protocol { .. } | BridgeError::ProtocolVersionMismatch { .. }) => {
                ProviderError::Protocol(e.to_string())
            }
            e => ProviderError::Transport(e.to_string()),
        }
    }
}
