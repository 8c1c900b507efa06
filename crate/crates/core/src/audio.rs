//! 16-bit mono PCM WAV input/output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::spectral::Waveform;

pub const SAMPLE_RATE: u32 = 16_000;

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| match source {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Wav {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// Reads a mono 16-bit WAV, rejecting any other layout or a sample rate
/// other than `expected_rate`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!(
                "expected mono 16-bit PCM, found {} channel(s), {} bits, {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::SampleRateMismatch {
            expected: expected_rate,
            found: spec.sample_rate,
        });
    }
    let pcm = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err(path))?;
    Waveform::from_pcm16(&pcm, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for v in w.to_pcm16() {
        writer.write_sample(v).map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_pcm_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..1000).map(|n| (n as f64 * 0.05).sin() * 0.7).collect(), SAMPLE_RATE).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path, SAMPLE_RATE).unwrap();
        assert_eq!(back, w.quantized());
    }

    #[test]
    fn wrong_rate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        write_wav(&path, &Waveform::silence(100, 8000).unwrap()).unwrap();
        assert!(matches!(
            read_wav(&path, SAMPLE_RATE),
            Err(Error::SampleRateMismatch {
                expected: 16000,
                found: 8000
            })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_wav("/nonexistent/x.wav", SAMPLE_RATE).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.wav"));
    }
}
