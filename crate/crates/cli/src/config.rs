use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use cerse_core::augment::AugmentConfig;
use cerse_core::datasim::CorpusConfig;
use cerse_core::nets::{CerEstimatorConfig, SeModelConfig};
use cerse_core::recognizer::{ExternalRecognizer, MockRecognizer, MockRecognizerConfig, Recognizer};
use cerse_core::trainer::{ModelConfig, TrainConfig};
use cerse_core::StftConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs, read from one TOML file. Missing tables take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `corpus.seed` and `train.seed` when set.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub corpus: CorpusConfig,
    pub stft: StftConfig,
    pub augment: AugmentConfig,
    pub se: SeModelConfig,
    pub estimator: CerEstimatorConfig,
    pub train: TrainConfig,
    pub mock: MockRecognizerConfig,
    pub recognizer: RecognizerChoice,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `<id>.wav` files plus `transcripts.tsv`. When absent,
    /// `simulate` renders synthetic mock utterances.
    pub speech_dir: Option<PathBuf>,
    /// Directory of noise WAVs. When absent, synthetic noise is generated.
    pub noise_dir: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub utterances: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub noise_sources: usize,
    pub noise_secs: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            utterances: 200,
            min_chars: 4,
            max_chars: 8,
            noise_sources: 6,
            noise_secs: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecognizerKind {
    #[default]
    Mock,
    External,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerChoice {
    pub kind: RecognizerKind,
    /// Shell command template with `{input}` and `{output}` placeholders;
    /// external recognizers only.
    pub command: Option<String>,
    pub timeout_secs: Option<u64>,
    pub concurrency: Option<usize>,
}

impl RecognizerChoice {
    fn external(&self) -> Result<Option<ExternalRecognizer>> {
        let r = self;
        match (r.kind, &r.command) {
            (RecognizerKind::Mock, None) if r.timeout_secs.is_none() && r.concurrency.is_none() => Ok(None),
            (RecognizerKind::Mock, _) => {
                bail!("recognizer: command, timeout_secs and concurrency apply to external recognizers only")
            }
            (RecognizerKind::External, None) => bail!("recognizer: external recognizer needs a command"),
            (RecognizerKind::External, Some(cmd)) => {
                let mut ext = ExternalRecognizer::new(cmd.clone())?;
                if let Some(t) = r.timeout_secs {
                    ext = ext.with_timeout(Duration::from_secs(t));
                }
                if let Some(c) = r.concurrency {
                    ext = ext.with_concurrency(c);
                }
                Ok(Some(ext))
            }
        }
    }
}

impl RunConfig {
    /// Reads and validates `path`; relative data paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&src).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.speech_dir, &mut cfg.data.noise_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.corpus.seed = s;
            self.train.seed = s;
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            stft: self.stft,
            se: self.se.clone(),
            estimator: self.estimator.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.augment.validate(self.stft.bins())?;
        self.mock.validate()?;
        if self.corpus.repetitions == 0 {
            bail!("corpus.repetitions must be at least 1");
        }
        let syn = &self.data.synthetic;
        if syn.min_chars == 0 || syn.min_chars > syn.max_chars {
            bail!("data.synthetic needs 0 < min_chars <= max_chars");
        }
        if syn.noise_sources == 0 || !(syn.noise_secs > 0.0) {
            bail!("data.synthetic needs at least one noise source of positive length");
        }
        self.recognizer.external()?;
        Ok(())
    }

    pub fn recognizer(&self) -> Result<Arc<dyn Recognizer>> {
        Ok(match self.recognizer.external()? {
            Some(ext) => Arc::new(ext),
            None => Arc::new(MockRecognizer::new(self.mock.clone())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_tables_fill_in() {
        let cfg: RunConfig = toml::from_str("[train]\nepochs = 2\n[se]\nblstm_hidden = 8\n").unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.se.blstm_hidden, 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 2\n").is_err());
        assert!(toml::from_str::<RunConfig>("[recognizer]\nkind = \"mock\"\nextra = 1\n").is_err());
    }

    #[test]
    fn external_recognizer_parses() {
        let cfg: RunConfig =
            toml::from_str("[recognizer]\nkind = \"external\"\ncommand = \"asr {input} {output}\"\n").unwrap();
        cfg.validate().unwrap();
        let bad: RunConfig = toml::from_str("[recognizer]\nkind = \"external\"\ncommand = \"asr\"\n").unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn desk_file_matches_presets() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let cfg = RunConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model(), ModelConfig::desk());
        let train = TrainConfig::desk();
        assert_eq!(
            (cfg.train.epochs, cfg.train.lr_cer, cfg.train.lr_se),
            (train.epochs, train.lr_cer, train.lr_se)
        );
    }

    #[test]
    fn seed_flag_wins() {
        let mut cfg = RunConfig {
            seed: Some(3),
            ..Default::default()
        };
        cfg.apply_seed(Some(7));
        assert_eq!((cfg.corpus.seed, cfg.train.seed), (7, 7));
    }
}
