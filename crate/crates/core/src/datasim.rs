//! Noisy-speech simulation: noise selection, VAD-gated SNR mixing and
//! corpus generation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::metrics::{vad, FrameSpec, Transcript, DEFAULT_VAD_THRESHOLD_DB};
use crate::recognizer::{encode_mock, MockRecognizerConfig};
use crate::spectral::Waveform;

/// One planned mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub speech_id: String,
    pub noise_ids: Vec<String>,
    pub target_snr_db: f64,
    pub seed: u64,
}

fn draw_noises<R: Rng>(noise_ids: &[String], rng: &mut R) -> Vec<String> {
    let want = if rng.random_bool(0.5) { 2 } else { 1 };
    if noise_ids.len() >= want {
        sample(rng, noise_ids.len(), want)
            .into_iter()
            .map(|i| noise_ids[i].clone())
            .collect()
    } else {
        (0..want).map(|_| noise_ids[0].clone()).collect()
    }
}

fn draw_snr<R: Rng>(mean_db: f64, spread_db: f64, rng: &mut R) -> Result<f64> {
    if !mean_db.is_finite() || !spread_db.is_finite() || spread_db < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "SNR distribution needs a finite mean and a non-negative spread, got ({mean_db}, {spread_db})"
        )));
    }
    if spread_db == 0.0 {
        return Ok(mean_db);
    }
    let normal = Normal::new(mean_db, spread_db).expect("validated parameters");
    Ok(normal.sample(rng))
}

/// Draws a speech source, one or two noises (equally likely) and a Gaussian
/// SNR with standard deviation `snr_spread_db`.
pub fn sample_mixspec<R: Rng>(
    speech_ids: &[String],
    noise_ids: &[String],
    snr_mean_db: f64,
    snr_spread_db: f64,
    rng: &mut R,
) -> Result<MixSpec> {
    if speech_ids.is_empty() {
        return Err(Error::Empty("speech pool"));
    }
    if noise_ids.is_empty() {
        return Err(Error::Empty("noise pool"));
    }
    let speech_id = speech_ids[rng.random_range(0..speech_ids.len())].clone();
    let noise_ids = draw_noises(noise_ids, rng);
    let target_snr_db = draw_snr(snr_mean_db, snr_spread_db, rng)?;
    Ok(MixSpec {
        speech_id,
        noise_ids,
        target_snr_db,
        seed: rng.random(),
    })
}

/// Crops `noise` to `len` samples from a random offset, looping it first
/// when it is shorter.
pub fn fit_noise<R: Rng>(noise: &Waveform, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    let src = noise.samples();
    if src.is_empty() {
        return Err(Error::Empty("noise waveform"));
    }
    if src.len() >= len {
        let offset = rng.random_range(0..=src.len() - len);
        Ok(src[offset..offset + len].to_vec())
    } else {
        let offset = rng.random_range(0..src.len());
        Ok((0..len).map(|i| src[(offset + i) % src.len()]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub noisy: Waveform,
    pub clean: Waveform,
    /// Gain applied to the summed noise.
    pub noise_gain: f64,
}

/// Adds the summed noises to `speech` at `target_snr_db`, measured on the
/// speech's VAD-active frames.
pub fn mix<R: Rng>(
    speech: &Waveform,
    noises: &[&Waveform],
    target_snr_db: f64,
    frames: FrameSpec,
    rng: &mut R,
) -> Result<Mixture> {
    if noises.is_empty() || noises.len() > 2 {
        return Err(Error::InvalidConfig(format!(
            "expected 1 or 2 noises, got {}",
            noises.len()
        )));
    }
    if !target_snr_db.is_finite() {
        return Err(Error::InvalidConfig("target SNR must be finite".into()));
    }
    let rate = speech.sample_rate();
    let mut sum = vec![0.0; speech.len()];
    for n in noises {
        if n.sample_rate() != rate {
            return Err(Error::SampleRateMismatch {
                expected: rate,
                found: n.sample_rate(),
            });
        }
        for (acc, v) in sum.iter_mut().zip(fit_noise(n, speech.len(), rng)?) {
            *acc += v;
        }
    }
    let active = vad(speech, DEFAULT_VAD_THRESHOLD_DB, frames);
    let p_speech = active.gated_power(speech.samples());
    if p_speech <= 0.0 {
        return Err(Error::SilentSpeech);
    }
    let p_noise = active.gated_power(&sum);
    if p_noise <= 0.0 {
        return Err(Error::SilentNoise);
    }
    let noise_gain = (p_speech / (p_noise * 10f64.powf(target_snr_db / 10.0))).sqrt();
    let noisy = speech
        .samples()
        .iter()
        .zip(&sum)
        .map(|(s, n)| s + noise_gain * n)
        .collect();
    Ok(Mixture {
        noisy: Waveform::new(noisy, rate)?,
        clean: speech.clone(),
        noise_gain,
    })
}

/// VAD-gated SNR of `noisy` against `clean` (noise = noisy - clean).
pub fn measure_snr(clean: &Waveform, noisy: &Waveform, frames: FrameSpec) -> Result<f64> {
    if clean.len() != noisy.len() {
        return Err(Error::LengthMismatch(clean.len(), noisy.len()));
    }
    let active = vad(clean, DEFAULT_VAD_THRESHOLD_DB, frames);
    let noise: Vec<f64> = noisy
        .samples()
        .iter()
        .zip(clean.samples())
        .map(|(y, s)| y - s)
        .collect();
    let ps = active.gated_power(clean.samples());
    let pn = active.gated_power(&noise);
    if ps <= 0.0 {
        return Err(Error::SilentSpeech);
    }
    Ok(10.0 * (ps / pn).log10())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceUtterance {
    pub id: String,
    pub waveform: Waveform,
    pub transcript: Transcript,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSource {
    pub id: String,
    pub waveform: Waveform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Noisy copies generated per speech utterance.
    pub repetitions: usize,
    pub snr_mean_db: f64,
    /// Standard deviation of the SNR draw.
    pub snr_spread_db: f64,
    pub seed: u64,
    pub frames: FrameSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            repetitions: 1,
            snr_mean_db: 12.0,
            snr_spread_db: 8.0,
            seed: 0,
            frames: FrameSpec::default(),
        }
    }
}

/// A generated pair held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPair {
    pub id: String,
    pub noisy: Waveform,
    pub clean: Waveform,
    pub transcript: Transcript,
    pub snr_db: f64,
    pub noise_ids: Vec<String>,
}

const PEAK_LIMIT: f64 = 0.99;

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Mixes every utterance `repetitions` times. Pairs whose mixture would
/// clip are scaled down together, which leaves the SNR unchanged.
pub fn simulate(speech: &[SourceUtterance], noises: &[NoiseSource], cfg: &CorpusConfig) -> Result<Vec<CorpusPair>> {
    if speech.is_empty() {
        return Err(Error::Empty("speech pool"));
    }
    if noises.is_empty() {
        return Err(Error::Empty("noise pool"));
    }
    if cfg.repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be positive".into()));
    }
    let noise_ids: Vec<String> = noises.iter().map(|n| n.id.clone()).collect();
    let jobs: Vec<(usize, usize)> = (0..cfg.repetitions)
        .flat_map(|r| (0..speech.len()).map(move |u| (r, u)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(index, &(rep, u))| {
            let mut rng = pair_rng(cfg.seed, index);
            let utt = &speech[u];
            let chosen = draw_noises(&noise_ids, &mut rng);
            let snr = draw_snr(cfg.snr_mean_db, cfg.snr_spread_db, &mut rng)?;
            let waves: Vec<&Waveform> = chosen
                .iter()
                .map(|id| &noises.iter().find(|n| &n.id == id).expect("drawn from pool").waveform)
                .collect();
            let m = mix(&utt.waveform, &waves, snr, cfg.frames, &mut rng)?;
            let peak = m.noisy.peak();
            let (noisy, clean) = if peak > PEAK_LIMIT {
                let g = PEAK_LIMIT / peak;
                (m.noisy.scaled(g), m.clean.scaled(g))
            } else {
                (m.noisy, m.clean)
            };
            let id = if cfg.repetitions == 1 {
                utt.id.clone()
            } else {
                format!("{}_r{rep}", utt.id)
            };
            Ok(CorpusPair {
                id,
                noisy,
                clean,
                transcript: utt.transcript.clone(),
                snr_db: snr,
                noise_ids: chosen,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub noisy_path: PathBuf,
    pub clean_path: PathBuf,
    pub transcript: Transcript,
    pub snr_db: f64,
    pub noise_ids: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_HEADER: &str = "id\tnoisy_path\tclean_path\ttranscript\tsnr_db\tnoise_ids";

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.noisy_path.display(),
                r.clean_path.display(),
                r.transcript,
                r.snr_db,
                r.noise_ids.join(",")
            );
        }
        out
    }

    /// Parses a manifest; relative paths are resolved against `base`.
    pub fn parse(src: &str, base: &Path, name: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: name.to_path_buf(),
            line,
            message,
        };
        let mut lines = src.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(parse_err(1, format!("expected header `{MANIFEST_HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(parse_err(i + 1, format!("expected 6 fields, found {}", f.len())));
            }
            let snr_db = f[4]
                .parse::<f64>()
                .map_err(|e| parse_err(i + 1, format!("bad SNR {:?}: {e}", f[4])))?;
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            rows.push(ManifestRow {
                id: f[0].to_string(),
                noisy_path: resolve(f[1]),
                clean_path: resolve(f[2]),
                transcript: Transcript::new(f[3]),
                snr_db,
                noise_ids: f[5].split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
            });
        }
        Ok(Self { rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&src, base, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Loads every (noisy, clean) pair listed.
    pub fn load_pairs(&self, sample_rate: u32) -> Result<Vec<CorpusPair>> {
        self.rows
            .par_iter()
            .map(|r| {
                Ok(CorpusPair {
                    id: r.id.clone(),
                    noisy: read_wav(&r.noisy_path, sample_rate)?,
                    clean: read_wav(&r.clean_path, sample_rate)?,
                    transcript: r.transcript.clone(),
                    snr_db: r.snr_db,
                    noise_ids: r.noise_ids.clone(),
                })
            })
            .collect()
    }
}

/// Simulates the corpus and writes `noisy/`, `clean/` and `manifest.tsv`
/// under `out_dir`. Manifest paths are relative to `out_dir`.
pub fn build_corpus(
    speech: &[SourceUtterance],
    noises: &[NoiseSource],
    cfg: &CorpusConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let pairs = simulate(speech, noises, cfg)?;
    for sub in ["noisy", "clean"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let rows = pairs
        .par_iter()
        .map(|p| {
            let noisy_rel = PathBuf::from("noisy").join(format!("{}.wav", p.id));
            let clean_rel = PathBuf::from("clean").join(format!("{}.wav", p.id));
            write_wav(out_dir.join(&noisy_rel), &p.noisy)?;
            write_wav(out_dir.join(&clean_rel), &p.clean)?;
            Ok(ManifestRow {
                id: p.id.clone(),
                noisy_path: noisy_rel,
                clean_path: clean_rel,
                transcript: p.transcript.clone(),
                snr_db: p.snr_db,
                noise_ids: p.noise_ids.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { rows };
    manifest.write(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Random transcripts over the mock alphabet rendered as tone sequences.
pub fn synthetic_speech(
    cfg: &MockRecognizerConfig,
    count: usize,
    len_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<SourceUtterance>> {
    cfg.validate()?;
    if *len_range.start() == 0 || len_range.is_empty() {
        return Err(Error::InvalidConfig("transcript lengths must be positive".into()));
    }
    let alphabet: Vec<char> = cfg.alphabet.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let len = rng.random_range(len_range.clone());
            let text: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            let transcript = Transcript::new(&text);
            Ok(SourceUtterance {
                id: format!("syn{i:05}"),
                waveform: encode_mock(cfg, &transcript)?,
                transcript,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    /// White noise with a slow sinusoidal amplitude envelope.
    Modulated,
}

/// Generates `secs` of unit-variance noise of the given colour.
pub fn synthetic_noise(kind: NoiseKind, secs: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let len = (secs * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
    let mut samples = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Modulated => {
            let rate = rng.random_range(0.5..3.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            white
                .iter()
                .enumerate()
                .map(|(n, w)| {
                    let t = n as f64 / sample_rate as f64;
                    w * (0.6 + 0.4 * (std::f64::consts::TAU * rate * t + phase).sin())
                })
                .collect()
        }
    };
    let rms = (samples.iter().map(|x| x * x).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = 0.1 / rms;
        samples.iter_mut().for_each(|x| *x *= g);
    }
    Waveform::new(samples, sample_rate)
}

/// A small pool cycling through the noise kinds.
pub fn synthetic_noise_pool(count: usize, secs: f64, sample_rate: u32, seed: u64) -> Result<Vec<NoiseSource>> {
    let kinds = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Modulated];
    (0..count)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            Ok(NoiseSource {
                id: format!("{}{i:03}", serde_json::to_value(kind)?.as_str().unwrap_or("noise")),
                waveform: synthetic_noise(kind, secs, sample_rate, seed.wrapping_add(i as u64))?,
            })
        })
        .collect()
}
