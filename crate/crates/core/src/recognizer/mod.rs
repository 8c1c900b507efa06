//! The black-box recognizer boundary.
//!
//! Training code only ever sees [`Transcript`]s coming back from a
//! [`Recognizer`]; it is scored through [`QScorer`], which caches the capped
//! CER by audio content so repeated queries never reach the recognizer.

mod cache;
mod external;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub use cache::QScorer;
pub use external::ExternalRecognizer;
pub use mock::{encode_mock, recognize_mock, MockRecognizer, MockRecognizerConfig};

use crate::error::Result;
use crate::metrics::Transcript;
use crate::spectral::Waveform;

/// Audio in, text out. Implementations must be deterministic in the audio
/// content.
pub trait Recognizer: Send + Sync {
    /// Opaque identity string; part of every cache key.
    fn descriptor(&self) -> String;

    /// Maximum number of concurrent `recognize` calls the implementation
    /// tolerates.
    fn concurrency_limit(&self) -> usize {
        1
    }

    fn recognize(&self, batch: &[Waveform]) -> Result<Vec<Transcript>>;
}

impl<R: Recognizer + ?Sized> Recognizer for Arc<R> {
    fn descriptor(&self) -> String {
        (**self).descriptor()
    }

    fn concurrency_limit(&self) -> usize {
        (**self).concurrency_limit()
    }

    fn recognize(&self, batch: &[Waveform]) -> Result<Vec<Transcript>> {
        (**self).recognize(batch)
    }
}

/// Wraps a recognizer and counts calls and utterances passed through it.
pub struct CountingRecognizer<R> {
    inner: R,
    calls: AtomicUsize,
    utterances: AtomicUsize,
}

impl<R: Recognizer> CountingRecognizer<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            utterances: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn utterances(&self) -> usize {
        self.utterances.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }
}

impl<R: Recognizer> Recognizer for CountingRecognizer<R> {
    fn descriptor(&self) -> String {
        self.inner.descriptor()
    }

    fn concurrency_limit(&self) -> usize {
        self.inner.concurrency_limit()
    }

    fn recognize(&self, batch: &[Waveform]) -> Result<Vec<Transcript>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.utterances.fetch_add(batch.len(), Ordering::SeqCst);
        self.inner.recognize(batch)
    }
}
