//! Backend specs: `toy:<flags>`, `cmd:<command line>`, `tcp:<host:port>`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use cloze_forge::bridge::{BridgeProvider, ResponseCache, Session, SessionOptions, Transport};
use cloze_forge::toy_lm::TableLm;
use cloze_forge::DistributionProvider;

use crate::ConfigError;

pub type Provider = Box<dyn DistributionProvider + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Toy { corpus: PathBuf, alpha: f64 },
    Remote(Transport),
}

fn parse_toy(flags: &str) -> Result<BackendSpec> {
    let words = shlex::split(flags).ok_or_else(|| anyhow!("unbalanced quotes in toy flags"))?;
    let mut corpus = None;
    let mut alpha = 0.0;
    let mut it = words.into_iter();
    while let Some(flag) = it.next() {
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.clone(), None),
        };
        let mut value = || inline.clone().or_else(|| it.next()).ok_or_else(|| anyhow!("{name} needs a value"));
        match name.as_str() {
            "--corpus" => corpus = Some(PathBuf::from(value()?)),
            "--alpha" => alpha = value()?.parse().context("--alpha must be a number")?,
            other => bail!("unknown toy backend flag {other:?} (expected --corpus, --alpha)"),
        }
    }
    let corpus = corpus.ok_or_else(|| anyhow!("toy backend needs --corpus <file>"))?;
    Ok(BackendSpec::Toy { corpus, alpha })
}

impl BackendSpec {
    pub fn parse(spec: &str) -> Result<Self, ConfigError> {
        let parsed = if let Some(flags) = spec.strip_prefix("toy:") {
            parse_toy(flags)
        } else if let Some(cmd) = spec.strip_prefix("cmd:") {
            match shlex::split(cmd) {
                Some(words) if !words.is_empty() => {
                    Ok(BackendSpec::Remote(Transport::Command { program: words[0].clone(), args: words[1..].to_vec() }))
                }
                _ => Err(anyhow!("cmd: needs a command line")),
            }
        } else if let Some(addr) = spec.strip_prefix("tcp:") {
            if addr.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) {
                Ok(BackendSpec::Remote(Transport::Tcp(addr.to_string())))
            } else {
                Err(anyhow!("tcp: needs host:port"))
            }
        } else {
            Err(anyhow!("backend must start with toy:, cmd: or tcp:"))
        };
        parsed.map_err(|e| ConfigError(format!("backend {spec:?}: {e}")))
    }
}

pub fn load_toy(corpus: &Path, alpha: f64) -> Result<TableLm, ConfigError> {
    TableLm::from_corpus_file(corpus, alpha).map_err(|e| ConfigError(format!("toy corpus {}: {e}", corpus.display())))
}

/// Opens one provider per worker. Bridge providers serialize calls on their
/// session, so parallel workers each need their own.
pub fn open_providers(spec_text: &str, count: usize, timeout: Duration) -> Result<Vec<Provider>> {
    let spec = BackendSpec::parse(spec_text)?;
    let mut out: Vec<Provider> = Vec::with_capacity(count);
    for _ in 0..count.max(1) {
        match &spec {
            BackendSpec::Toy { corpus, alpha } => out.push(Box::new(load_toy(corpus, *alpha)?)),
            BackendSpec::Remote(t) => {
                let opts = SessionOptions { timeout, handshake_timeout: timeout, ..SessionOptions::default() };
                let session = Session::open(t, opts).with_context(|| format!("opening backend {spec_text}"))?;
                out.push(Box::new(BridgeProvider::new(session, ResponseCache::from_env(spec_text))));
            }
        }
    }
    Ok(out)
}
