use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::Recognizer;
use crate::error::{Error, Result};
use crate::metrics::{cer, CerScore, Transcript};
use crate::spectral::Waveform;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    audio: String,
    descriptor: String,
    reference: String,
}

/// Content hash of the audio as a recognizer receives it (16-bit PCM).
pub fn audio_hash(w: &Waveform) -> String {
    let mut h = Sha256::new();
    h.update(w.sample_rate().to_le_bytes());
    for v in w.to_pcm16() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn text_hash(t: &Transcript) -> String {
    hex::encode(Sha256::digest(t.as_str().as_bytes()))
}

fn descriptor_hash(d: &str) -> String {
    hex::encode(Sha256::digest(d.as_bytes()))[..16].to_string()
}

/// Evaluates `Q(w, t) = cer(recognize(w), t)` with a content-addressed cache.
///
/// Audio is quantized to 16-bit before hashing and recognition, so the
/// recognizer sees exactly what a WAV on disk would hold. The optional cache
/// file is append-only with tab-separated records
/// `audio_hash descriptor ref_hash value insertions deletions substitutions`
/// (the descriptor column is a short hash of the recognizer descriptor).
pub struct QScorer {
    recognizer: Arc<dyn Recognizer>,
    descriptor: String,
    entries: Mutex<HashMap<CacheKey, CerScore>>,
    file: Option<(PathBuf, Mutex<File>)>,
    invocations: AtomicUsize,
    chunk: usize,
}

impl QScorer {
    pub fn new(recognizer: Arc<dyn Recognizer>) -> Self {
        let descriptor = descriptor_hash(&recognizer.descriptor());
        Self {
            recognizer,
            descriptor,
            entries: Mutex::new(HashMap::new()),
            file: None,
            invocations: AtomicUsize::new(0),
            chunk: 64,
        }
    }

    /// Loads existing records from `path` and appends new ones to it.
    pub fn with_cache_file(recognizer: Arc<dyn Recognizer>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut scorer = Self::new(recognizer);
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut entries = scorer.entries.lock().expect("cache poisoned");
            for (idx, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.is_empty() {
                    continue;
                }
                let (key, score) = parse_record(&line).ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    line: idx + 1,
                    message: "malformed cache record".into(),
                })?;
                entries.insert(key, score);
            }
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        scorer.file = Some((path, Mutex::new(f)));
        Ok(scorer)
    }

    /// Number of utterances per recognizer call.
    pub fn with_chunk_size(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    /// Number of `recognize` calls issued so far.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::SeqCst)
    }

    pub fn cached_entries(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn recognizer(&self) -> &Arc<dyn Recognizer> {
        &self.recognizer
    }

    pub fn score(&self, w: &Waveform, reference: &Transcript) -> Result<CerScore> {
        Ok(self.score_batch(&[(w, reference)])?[0])
    }

    /// Scores every pair, recognizing only cache misses (deduplicated).
    pub fn score_batch(&self, items: &[(&Waveform, &Transcript)]) -> Result<Vec<CerScore>> {
        if items.iter().any(|(_, t)| t.is_empty()) {
            return Err(Error::EmptyReference);
        }
        let keys: Vec<CacheKey> = items
            .iter()
            .map(|(w, t)| CacheKey {
                audio: audio_hash(w),
                descriptor: self.descriptor.clone(),
                reference: text_hash(t),
            })
            .collect();

        let mut pending: Vec<usize> = Vec::new();
        {
            let entries = self.entries.lock().expect("cache poisoned");
            let mut seen = HashMap::new();
            for (i, k) in keys.iter().enumerate() {
                if !entries.contains_key(k) && seen.insert(k.clone(), i).is_none() {
                    pending.push(i);
                }
            }
        }

        if !pending.is_empty() {
            let chunks: Vec<&[usize]> = pending.chunks(self.chunk).collect();
            let limit = self.recognizer.concurrency_limit().max(1);
            for wave in chunks.chunks(limit) {
                let results: Vec<Result<Vec<Transcript>>> = if wave.len() == 1 {
                    vec![self.recognize_indices(items, wave[0])]
                } else {
                    std::thread::scope(|scope| {
                        let handles: Vec<_> = wave
                            .iter()
                            .map(|idx| scope.spawn(move || self.recognize_indices(items, idx)))
                            .collect();
                        handles
                            .into_iter()
                            .map(|h| h.join().expect("recognizer thread panicked"))
                            .collect()
                    })
                };
                for (idx, texts) in wave.iter().zip(results) {
                    let texts = texts?;
                    for (&i, hyp) in idx.iter().zip(texts) {
                        let score = cer(&hyp, items[i].1)?;
                        self.insert(keys[i].clone(), score)?;
                    }
                }
            }
        }

        let entries = self.entries.lock().expect("cache poisoned");
        Ok(keys.iter().map(|k| entries[k]).collect())
    }

    fn recognize_indices(&self, items: &[(&Waveform, &Transcript)], idx: &[usize]) -> Result<Vec<Transcript>> {
        let batch: Vec<Waveform> = idx.iter().map(|&i| items[i].0.quantized()).collect();
        self.invocations.fetch_add(1, Ordering::SeqCst);
        let texts = self.recognizer.recognize(&batch)?;
        if texts.len() != batch.len() {
            return Err(Error::MalformedOutput(format!(
                "recognizer returned {} transcripts for {} inputs",
                texts.len(),
                batch.len()
            )));
        }
        Ok(texts)
    }

    fn insert(&self, key: CacheKey, score: CerScore) -> Result<()> {
        if let Some((path, file)) = &self.file {
            let mut f = file.lock().expect("cache file poisoned");
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                key.audio,
                key.descriptor,
                key.reference,
                score.value,
                score.insertions,
                score.deletions,
                score.substitutions
            )
            .map_err(|e| Error::io(path, e))?;
        }
        self.entries.lock().expect("cache poisoned").insert(key, score);
        Ok(())
    }
}

fn parse_record(line: &str) -> Option<(CacheKey, CerScore)> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 7 {
        return None;
    }
    Some((
        CacheKey {
            audio: f[0].to_string(),
            descriptor: f[1].to_string(),
            reference: f[2].to_string(),
        },
        CerScore {
            value: f[3].parse().ok()?,
            insertions: f[4].parse().ok()?,
            deletions: f[5].parse().ok()?,
            substitutions: f[6].parse().ok()?,
        },
    ))
}
