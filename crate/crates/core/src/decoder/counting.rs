use std::sync::atomic::{AtomicUsize, Ordering};

use crate::domain::{DistributionProvider, ProviderError, Ranked, Slot, TokenId};

/// Wraps a provider and counts predict queries (a batch of `n` counts `n`).
#[derive(Debug)]
pub struct CountingProvider<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: DistributionProvider> DistributionProvider for CountingProvider<P> {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        self.inner.tokenize(text)
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, ProviderError> {
        self.inner.detokenize(ids)
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn predict(&self, slots: &[Slot], top_k: usize) -> Result<Vec<Ranked>, ProviderError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(slots, top_k)
    }

    fn predict_batch(&self, queries: &[Vec<Slot>], top_k: usize) -> Result<Vec<Vec<Ranked>>, ProviderError> {
        self.calls.fetch_add(queries.len(), Ordering::Relaxed);
        self.inner.predict_batch(queries, top_k)
    }
}
