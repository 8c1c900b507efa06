//! Adapter for recognizers run as an external command.
//!
//! The command template must contain `{input}` and `{output}`. For every
//! batch the adapter writes `utt000000.wav`, `utt000001.wav`, ... into a
//! fresh directory, substitutes that directory for `{input}` and a TSV path
//! for `{output}`, and runs the result through `sh -c`. The command must write
//! one `id<TAB>text` line per input file, where `id` is the file stem.

use std::collections::HashMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::Recognizer;
use crate::audio::write_wav;
use crate::error::{Error, Result};
use crate::metrics::{parse_id_text_tsv, Transcript};
use crate::spectral::Waveform;

/// Environment variable overriding where per-batch temporary directories go.
pub const TEMP_DIR_ENV: &str = "CERSE_TMPDIR";

#[derive(Clone, Debug)]
pub struct ExternalRecognizer {
    template: String,
    timeout: Duration,
    temp_root: Option<PathBuf>,
    concurrency: usize,
}

impl ExternalRecognizer {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        for placeholder in ["{input}", "{output}"] {
            if !template.contains(placeholder) {
                return Err(Error::InvalidConfig(format!(
                    "recognizer command must contain {placeholder}"
                )));
            }
        }
        Ok(Self {
            template,
            timeout: Self::DEFAULT_TIMEOUT,
            temp_root: std::env::var_os(TEMP_DIR_ENV).map(PathBuf::from),
            concurrency: 1,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_temp_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.temp_root = Some(root.into());
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    fn utterance_id(i: usize) -> String {
        format!("utt{i:06}")
    }
}

fn quote(path: &std::path::Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', r"'\''"))
}

impl Recognizer for ExternalRecognizer {
    fn descriptor(&self) -> String {
        format!("external:{}", self.template)
    }

    fn concurrency_limit(&self) -> usize {
        self.concurrency
    }

    fn recognize(&self, batch: &[Waveform]) -> Result<Vec<Transcript>> {
        let dir = match &self.temp_root {
            Some(root) => tempfile::Builder::new().prefix("cerse-asr").tempdir_in(root),
            None => tempfile::Builder::new().prefix("cerse-asr").tempdir(),
        }
        .map_err(|e| Error::io(self.temp_root.clone().unwrap_or_else(std::env::temp_dir), e))?;
        let input = dir.path().join("wav");
        std::fs::create_dir(&input).map_err(|e| Error::io(&input, e))?;
        for (i, w) in batch.iter().enumerate() {
            write_wav(input.join(format!("{}.wav", Self::utterance_id(i))), w)?;
        }
        let output = dir.path().join("hyp.tsv");
        let command = self
            .template
            .replace("{input}", &quote(&input))
            .replace("{output}", &quote(&output));

        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&command)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Recognizer(format!("failed to spawn `{command}`: {e}")))?;
        let mut stderr = child.stderr.take().expect("stderr piped");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::RecognizerTimeout(self.timeout.as_secs()));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Recognizer(format!("waiting for recognizer: {e}"))),
            }
        };
        let stderr = reader.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::Recognizer(format!(
                "command exited with {status}: {}",
                stderr.trim()
            )));
        }

        let body = std::fs::read_to_string(&output).map_err(|e| Error::io(&output, e))?;
        let rows = parse_id_text_tsv(&body, "recognizer output").map_err(|e| Error::MalformedOutput(e.to_string()))?;
        let mut by_id: HashMap<String, String> = rows.into_iter().collect();
        let texts = (0..batch.len())
            .map(|i| {
                let id = Self::utterance_id(i);
                by_id
                    .remove(&id)
                    .map(|t| Transcript::new(&t))
                    .ok_or_else(|| Error::MalformedOutput(format!("no transcript for {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(id) = by_id.keys().next() {
            return Err(Error::MalformedOutput(format!("unexpected id {id:?}")));
        }
        Ok(texts)
    }
}
