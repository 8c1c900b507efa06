//! A deterministic tone-template recognizer.
//!
//! Every character is rendered as a tone burst in its own frequency band and
//! lasts `symbol_duration` STFT frames. Recognition splits the spectrogram
//! into blocks of that many frames and, per block, emits the character whose
//! band holds the most energy, provided that band carries at least
//! `detection_threshold` of the block's total energy. Broadband noise lowers
//! that share and causes deletions, so an enhancement front end that removes
//! out-of-band noise measurably lowers the CER.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Recognizer;
use crate::audio::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::metrics::Transcript;
use crate::spectral::{stft, StftConfig, Waveform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockRecognizerConfig {
    pub alphabet: String,
    /// Frames per character.
    pub symbol_duration: usize,
    /// Half-open bin ranges `[lo, hi)`.
    pub bands: Vec<[usize; 2]>,
    pub band_map: BTreeMap<char, usize>,
    /// Minimum share of block energy the winning band must hold.
    pub detection_threshold: f64,
    /// Peak amplitude of rendered tone bursts.
    pub amplitude: f64,
    pub sample_rate: u32,
    pub stft: StftConfig,
}

impl Default for MockRecognizerConfig {
    fn default() -> Self {
        let alphabet = "abcd".to_string();
        let band_map = alphabet.chars().enumerate().map(|(i, c)| (c, i)).collect();
        Self {
            alphabet,
            symbol_duration: 4,
            bands: vec![[36, 44], [76, 84], [116, 124], [156, 164]],
            band_map,
            detection_threshold: 0.5,
            amplitude: 0.5,
            sample_rate: SAMPLE_RATE,
            stft: StftConfig::default(),
        }
    }
}

impl MockRecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidConfig(format!("mock recognizer: {m}")));
        self.stft.validate()?;
        let chars: Vec<char> = self.alphabet.chars().collect();
        if chars.len() < 2 {
            return invalid("alphabet needs at least two characters".into());
        }
        if self.symbol_duration == 0 {
            return invalid("symbol_duration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return invalid("detection_threshold must be in [0, 1]".into());
        }
        let bins = self.stft.bins();
        for (i, [lo, hi]) in self.bands.iter().enumerate() {
            if lo >= hi || *hi > bins {
                return invalid(format!("band {i} [{lo}, {hi}) is empty or beyond {bins} bins"));
            }
            for [lo2, hi2] in &self.bands[i + 1..] {
                if lo < hi2 && lo2 < hi {
                    return invalid(format!("bands [{lo}, {hi}) and [{lo2}, {hi2}) overlap"));
                }
            }
        }
        for c in &chars {
            match self.band_map.get(c) {
                Some(b) if *b < self.bands.len() => {}
                _ => return invalid(format!("character {c:?} has no valid band")),
            }
        }
        let mut used: Vec<usize> = chars.iter().map(|c| self.band_map[c]).collect();
        used.sort_unstable();
        used.dedup();
        if used.len() != chars.len() {
            return invalid("two characters share a band".into());
        }
        if self.band_map.keys().any(|c| !chars.contains(c)) {
            return invalid("band_map names a character outside the alphabet".into());
        }
        Ok(())
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.symbol_duration * self.stft.hop
    }

    fn centre_bin(&self, band: usize) -> f64 {
        let [lo, hi] = self.bands[band];
        (lo + hi) as f64 / 2.0
    }
}

#[derive(Clone, Debug)]
pub struct MockRecognizer {
    cfg: MockRecognizerConfig,
    by_band: BTreeMap<usize, char>,
}

impl MockRecognizer {
    pub fn new(cfg: MockRecognizerConfig) -> Result<Self> {
        cfg.validate()?;
        let by_band = cfg.alphabet.chars().map(|c| (cfg.band_map[&c], c)).collect();
        Ok(Self { cfg, by_band })
    }

    pub fn config(&self) -> &MockRecognizerConfig {
        &self.cfg
    }

    pub fn recognize_one(&self, w: &Waveform) -> Result<Transcript> {
        recognize_mock(self, w)
    }

    pub fn encode(&self, text: &Transcript) -> Result<Waveform> {
        encode_mock(&self.cfg, text)
    }
}

/// Renders `text` as consecutive tone bursts.
pub fn encode_mock(cfg: &MockRecognizerConfig, text: &Transcript) -> Result<Waveform> {
    let chars = text.chars();
    if let Some(c) = chars
        .iter()
        .find(|c| !cfg.band_map.contains_key(c) || !cfg.alphabet.contains(**c))
    {
        return Err(Error::OutOfAlphabet(*c));
    }
    let per = cfg.samples_per_symbol();
    let len = (chars.len() * per).max(cfg.stft.fft_size);
    let mut samples = vec![0.0; len];
    let ramp = (per / 8).clamp(1, 64);
    for (k, c) in chars.iter().enumerate() {
        let freq = cfg.centre_bin(cfg.band_map[c]) / cfg.stft.fft_size as f64;
        for n in 0..per {
            let edge = n.min(per - 1 - n);
            let gain = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            samples[k * per + n] = cfg.amplitude * gain * (2.0 * PI * freq * n as f64).sin();
        }
    }
    Waveform::new(samples, cfg.sample_rate)
}

pub fn recognize_mock(rec: &MockRecognizer, w: &Waveform) -> Result<Transcript> {
    let cfg = &rec.cfg;
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: cfg.sample_rate,
            found: w.sample_rate(),
        });
    }
    let padded;
    let w = if w.len() < cfg.stft.fft_size {
        let mut s = w.samples().to_vec();
        s.resize(cfg.stft.fft_size, 0.0);
        padded = Waveform::new(s, w.sample_rate())?;
        &padded
    } else {
        w
    };
    let spec = stft(w, &cfg.stft)?;
    let power = spec.magnitude().mapv(|m| m * m);
    let frames = power.ncols();
    let d = cfg.symbol_duration;
    let mut out = String::new();
    for block in 0..frames / d {
        let cols = block * d..(block + 1) * d;
        let total: f64 = cols.clone().map(|n| power.column(n).sum()).sum();
        if total <= 1e-12 {
            continue;
        }
        let (best, energy) = rec
            .by_band
            .keys()
            .map(|&b| {
                let [lo, hi] = cfg.bands[b];
                let e: f64 = cols.clone().map(|n| (lo..hi).map(|f| power[[f, n]]).sum::<f64>()).sum();
                (b, e)
            })
            .fold(
                (usize::MAX, f64::NEG_INFINITY),
                |acc, x| if x.1 > acc.1 { x } else { acc },
            );
        if energy / total >= cfg.detection_threshold {
            out.push(rec.by_band[&best]);
        }
    }
    Ok(Transcript::new(&out))
}

impl Recognizer for MockRecognizer {
    fn descriptor(&self) -> String {
        format!("mock:{}", serde_json::to_string(&self.cfg).expect("config serializes"))
    }

    fn concurrency_limit(&self) -> usize {
        usize::MAX
    }

    fn recognize(&self, batch: &[Waveform]) -> Result<Vec<Transcript>> {
        batch.iter().map(|w| recognize_mock(self, w)).collect()
    }
}
