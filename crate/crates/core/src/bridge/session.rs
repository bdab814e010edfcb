//! One conversation with a backend: handshake, id pairing, pipelining, timeouts.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde_json::Value;

use super::wire::{decode, encode, BackendInfo, Request, PROTOCOL_VERSION};
use super::BridgeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOptions {
    /// Longest wait for any single response.
    pub timeout: Duration,
    pub handshake_timeout: Duration,
    /// Maximum number of requests awaiting a response.
    pub window: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(120), handshake_timeout: Duration::from_secs(60), window: 8 }
    }
}

/// Where the backend lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// Spawn a process and talk over its stdin/stdout.
    Command {
        program: String,
        args: Vec<String>,
    },
    Tcp(String),
}

type Line = Result<String, String>;

/// A serial conversation with one backend. Requests carry strictly increasing
/// ids starting at 1 (the handshake). A timeout or malformed frame leaves the
/// conversation in an unknown state, so the session refuses further use.
pub struct Session {
    writer: Box<dyn Write + Send>,
    lines: Receiver<Line>,
    next_id: u64,
    opts: SessionOptions,
    info: BackendInfo,
    child: Option<Child>,
    broken: Option<String>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("info", &self.info).field("next_id", &self.next_id).finish_non_exhaustive()
    }
}

fn spawn_reader<R: Read + Send + 'static>(reader: R) -> Receiver<Line> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match reader.read_until(b'\n', &mut buf) {
                Ok(0) => break,
                Ok(_) => {
                    while buf.last().is_some_and(|b| *b == b'\n' || *b == b'\r') {
                        buf.pop();
                    }
                    let line = String::from_utf8(buf.clone()).map_err(|_| String::from_utf8_lossy(&buf).into_owned());
                    if tx.send(line).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
    });
    rx
}

impl Session {
    pub fn open(transport: &Transport, opts: SessionOptions) -> Result<Self, BridgeError> {
        match transport {
            Transport::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| BridgeError::SpawnFailure(format!("{program}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut s = Self::handshake(Box::new(stdin), spawn_reader(stdout), opts);
                match &mut s {
                    Ok(s) => s.child = Some(child),
                    Err(_) => {
                        let _ = child.kill();
                        let _ = child.wait();
                    }
                }
                s
            }
            Transport::Tcp(addr) => {
                let stream =
                    TcpStream::connect(addr).map_err(|e| BridgeError::SpawnFailure(format!("connect {addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let read = stream.try_clone().map_err(|e| BridgeError::Io(e.to_string()))?;
                Self::handshake(Box::new(stream), spawn_reader(read), opts)
            }
        }
    }

    /// Session over arbitrary byte streams (e.g. pipes to an in-process backend).
    pub fn from_streams<R, W>(reader: R, writer: W, opts: SessionOptions) -> Result<Self, BridgeError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake(Box::new(writer), spawn_reader(reader), opts)
    }

    fn handshake(
        writer: Box<dyn Write + Send>,
        lines: Receiver<Line>,
        opts: SessionOptions,
    ) -> Result<Self, BridgeError> {
        let placeholder = BackendInfo { vocab_size: 0, mask_id: 0, protocol: 0, top_k_cap: None };
        let mut s = Self { writer, lines, next_id: 1, opts, info: placeholder, child: None, broken: None };
        let result = match s.call_many(&[Request::Vocab], opts.handshake_timeout) {
            Err(BridgeError::Timeout { .. }) => return Err(BridgeError::HandshakeTimeout(opts.handshake_timeout)),
            Err(e) => return Err(e),
            Ok(mut v) => v.pop().expect("one reply per request"),
        };
        let text = result.to_string();
        let info: BackendInfo =
            serde_json::from_value(result).map_err(|e| BridgeError::protocol(&text, format!("bad handshake: {e}")))?;
        if info.protocol != PROTOCOL_VERSION {
            return Err(BridgeError::ProtocolVersionMismatch { expected: PROTOCOL_VERSION, got: info.protocol });
        }
        s.info = info;
        Ok(s)
    }

    pub fn info(&self) -> BackendInfo {
        self.info
    }

    pub fn options(&self) -> SessionOptions {
        self.opts
    }

    pub fn call(&mut self, request: &Request) -> Result<Value, BridgeError> {
        Ok(self.call_many(std::slice::from_ref(request), self.opts.timeout)?.pop().expect("one reply per request"))
    }

    /// Sends every request, keeping at most `window` unanswered at a time, and
    /// returns the results in request order. If the backend reports an error
    /// for any request the remaining replies are still collected, then the
    /// first error in request order is returned.
    pub fn call_all(&mut self, requests: &[Request]) -> Result<Vec<Value>, BridgeError> {
        self.call_many(requests, self.opts.timeout)
    }

    fn call_many(&mut self, requests: &[Request], timeout: Duration) -> Result<Vec<Value>, BridgeError> {
        if let Some(why) = &self.broken {
            return Err(BridgeError::SessionClosed(why.clone()));
        }
        let r = self.exchange(requests, timeout);
        if let Err(e) = &r {
            if !matches!(e, BridgeError::Backend { .. }) {
                self.broken = Some(e.to_string());
            }
        }
        r
    }

    fn exchange(&mut self, requests: &[Request], timeout: Duration) -> Result<Vec<Value>, BridgeError> {
        let first_id = self.next_id;
        self.next_id += requests.len() as u64;
        let mut results: Vec<Option<Result<Value, (String, String)>>> = vec![None; requests.len()];
        let mut outstanding: HashMap<u64, usize> = HashMap::new();
        let mut sent = 0;
        let mut received = 0;
        let window = self.opts.window.max(1);
        while received < requests.len() {
            while sent < requests.len() && outstanding.len() < window {
                let id = first_id + sent as u64;
                self.writer.write_all(encode(id, &requests[sent]).as_bytes()).map_err(|e| self.write_error(e))?;
                outstanding.insert(id, sent);
                sent += 1;
            }
            self.writer.flush().map_err(|e| self.write_error(e))?;
            let line = match self.lines.recv_timeout(timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(lossy)) => return Err(BridgeError::protocol(&lossy, "invalid UTF-8")),
                Err(RecvTimeoutError::Timeout) => {
                    let idx = *outstanding.values().min().expect("waiting implies an outstanding request");
                    return Err(BridgeError::Timeout { op: requests[idx].op().to_string(), timeout });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(BridgeError::SessionClosed("backend closed its output".into()));
                }
            };
            let resp = decode(&line)?;
            let Some(idx) = outstanding.remove(&resp.id) else {
                return Err(BridgeError::protocol(&line, format!("unexpected response id {}", resp.id)));
            };
            results[idx] = Some(resp.body);
            received += 1;
        }
        results
            .into_iter()
            .map(|r| {
                r.expect("every request answered").map_err(|(code, message)| BridgeError::Backend { code, message })
            })
            .collect()
    }

    fn write_error(&self, e: std::io::Error) -> BridgeError {
        BridgeError::SessionClosed(format!("writing to backend: {e}"))
    }

    /// Says goodbye and reaps the backend process, if any.
    pub fn close(mut self) -> Result<(), BridgeError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), BridgeError> {
        let r = if self.broken.is_none() {
            let grace = self.opts.timeout.min(Duration::from_secs(5));
            self.call_many(&[Request::Close], grace).map(|_| ())
        } else {
            Ok(())
        };
        self.broken.get_or_insert_with(|| "closed".into());
        if let Some(mut child) = self.child.take() {
            // closing stdin lets a well-behaved backend exit on its own
            self.writer = Box::new(std::io::sink());
            let deadline = std::time::Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if std::time::Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
        r
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.child.is_some() || self.broken.is_none() {
            let _ = self.shutdown();
        }
    }
}
