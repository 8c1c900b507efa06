use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cerse_core::audio::{read_wav, SAMPLE_RATE};
use cerse_core::datasim::{synthetic_noise_pool, synthetic_speech, Manifest, NoiseSource, SourceUtterance};
use cerse_core::metrics::parse_id_text_tsv;
use cerse_core::trainer::TrainSample;
use cerse_core::{StftConfig, Transcript};

use crate::config::RunConfig;

pub const TRANSCRIPTS_FILE: &str = "transcripts.tsv";
pub const MANIFEST_FILE: &str = "manifest.tsv";

fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if !dir.is_dir() {
        bail!("{what} directory not found: {}", dir.display());
    }
    Ok(())
}

/// `<id>.wav` files listed in `transcripts.tsv`.
pub fn load_speech_dir(dir: &Path) -> Result<Vec<SourceUtterance>> {
    require_dir(dir, "speech")?;
    let tsv = dir.join(TRANSCRIPTS_FILE);
    let src = std::fs::read_to_string(&tsv).with_context(|| format!("reading {}", tsv.display()))?;
    let rows = parse_id_text_tsv(&src, &tsv.display().to_string())?;
    if rows.is_empty() {
        bail!("{} lists no utterances", tsv.display());
    }
    rows.into_iter()
        .map(|(id, text)| {
            let waveform = read_wav(dir.join(format!("{id}.wav")), SAMPLE_RATE)?;
            Ok(SourceUtterance {
                id,
                waveform,
                transcript: Transcript::new(&text),
            })
        })
        .collect()
}

pub fn load_noise_dir(dir: &Path) -> Result<Vec<NoiseSource>> {
    require_dir(dir, "noise")?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("noise directory {} holds no WAV files", dir.display());
    }
    paths
        .into_iter()
        .map(|p| {
            Ok(NoiseSource {
                id: stem(&p),
                waveform: read_wav(&p, SAMPLE_RATE)?,
            })
        })
        .collect()
}

pub fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Speech and noise sources named by the config, or the synthetic preset.
pub fn sources(cfg: &RunConfig) -> Result<(Vec<SourceUtterance>, Vec<NoiseSource>)> {
    let seed = cfg.corpus.seed;
    let syn = &cfg.data.synthetic;
    let speech = match &cfg.data.speech_dir {
        Some(d) => load_speech_dir(d)?,
        None => synthetic_speech(&cfg.mock, syn.utterances, syn.min_chars..=syn.max_chars, seed)?,
    };
    let noise = match &cfg.data.noise_dir {
        Some(d) => load_noise_dir(d)?,
        None => synthetic_noise_pool(syn.noise_sources, syn.noise_secs, SAMPLE_RATE, seed.wrapping_add(1))?,
    };
    Ok((speech, noise))
}

/// Reads a simulated corpus and precomputes its spectral forms.
pub fn load_corpus(dir: &Path, stft: &StftConfig) -> Result<Vec<TrainSample>> {
    require_dir(dir, "corpus")?;
    let manifest = Manifest::read(dir.join(MANIFEST_FILE))?;
    if manifest.rows.is_empty() {
        bail!("corpus {} is empty", dir.display());
    }
    manifest
        .load_pairs(SAMPLE_RATE)?
        .into_iter()
        .map(|p| Ok(TrainSample::prepare(p.id, p.noisy, p.clean, p.transcript, stft)?))
        .collect()
}
