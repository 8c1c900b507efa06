//! Short-time Fourier analysis/synthesis, mask application and the
//! per-frequency normalization used for both network inputs and targets.
//!
//! Framing: the signal is zero padded with `fft_size - hop` samples on the
//! left and enough on the right to complete the last frame. With a COLA
//! window every original sample is covered by a constant window sum, so
//! analysis followed by synthesis reconstructs the whole signal, edges
//! included. Frame `j` is centred on sample `j * hop` when `hop = fft_size / 2`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array1, Array2, Axis, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every per-frequency standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Mono time-domain audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidSampleRate(sample_rate));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power per sample.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// 16-bit PCM values as written to a WAV file (clipped to full scale).
    pub fn to_pcm16(&self) -> Vec<i16> {
        self.samples
            .iter()
            .map(|&x| (x.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)
            .collect()
    }

    pub fn from_pcm16(pcm: &[i16], sample_rate: u32) -> Result<Self> {
        Self::new(pcm.iter().map(|&v| v as f64 / i16::MAX as f64).collect(), sample_rate)
    }

    /// The waveform as a recognizer would see it after a 16-bit round trip.
    pub fn quantized(&self) -> Waveform {
        let pcm = self.to_pcm16();
        Waveform {
            samples: pcm.iter().map(|&v| v as f64 / i16::MAX as f64).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

impl WindowKind {
    /// Periodic window of the given length.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop: 256,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::InvalidStftConfig(format!(
                "fft_size must be even and >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::InvalidStftConfig(format!(
                "hop must be in 1..={}, got {}",
                self.fft_size, self.hop
            )));
        }
        self.cola_sum()?;
        Ok(())
    }

    /// The constant overlap-add sum of the window at this hop, or an error if
    /// the window does not overlap-add to a constant.
    pub fn cola_sum(&self) -> Result<f64> {
        let window = self.window.coefficients(self.fft_size);
        let mut acc = vec![0.0; self.hop];
        for (n, w) in window.iter().enumerate() {
            acc[n % self.hop] += w;
        }
        let first = acc[0];
        if first <= 0.0 || acc.iter().any(|a| (a - first).abs() > 1e-9 * first.max(1.0)) {
            return Err(Error::InvalidStftConfig(format!(
                "{:?} window of {} is not constant-overlap-add at hop {}",
                self.window, self.fft_size, self.hop
            )));
        }
        Ok(first)
    }

    fn left_pad(&self) -> usize {
        self.fft_size - self.hop
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len == 0 {
            return 0;
        }
        (len - 1 + self.left_pad()) / self.hop + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectrogramKind {
    Complex,
    Magnitude,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpectrogramValues {
    Complex(Array2<Complex64>),
    Magnitude(Array2<f64>),
}

/// An F x N time-frequency matrix with the framing that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: SpectrogramValues,
    config: StftConfig,
    source_len: usize,
}

impl Spectrogram {
    pub fn from_complex(values: Array2<Complex64>, config: StftConfig, source_len: usize) -> Result<Self> {
        check_frame_shape(values.dim(), &config, source_len)?;
        Ok(Self {
            values: SpectrogramValues::Complex(values),
            config,
            source_len,
        })
    }

    pub fn from_magnitude(values: Array2<f64>, config: StftConfig, source_len: usize) -> Result<Self> {
        check_frame_shape(values.dim(), &config, source_len)?;
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "magnitude spectrogram has negative or NaN entry {v}"
            )));
        }
        Ok(Self {
            values: SpectrogramValues::Magnitude(values),
            config,
            source_len,
        })
    }

    pub fn kind(&self) -> SpectrogramKind {
        match self.values {
            SpectrogramValues::Complex(_) => SpectrogramKind::Complex,
            SpectrogramValues::Magnitude(_) => SpectrogramKind::Magnitude,
        }
    }

    pub fn values(&self) -> &SpectrogramValues {
        &self.values
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn dim(&self) -> (usize, usize) {
        match &self.values {
            SpectrogramValues::Complex(v) => v.dim(),
            SpectrogramValues::Magnitude(v) => v.dim(),
        }
    }

    pub fn bins(&self) -> usize {
        self.dim().0
    }

    pub fn frames(&self) -> usize {
        self.dim().1
    }

    pub fn as_complex(&self) -> Option<&Array2<Complex64>> {
        match &self.values {
            SpectrogramValues::Complex(v) => Some(v),
            SpectrogramValues::Magnitude(_) => None,
        }
    }

    pub fn as_magnitude(&self) -> Option<&Array2<f64>> {
        match &self.values {
            SpectrogramValues::Magnitude(v) => Some(v),
            SpectrogramValues::Complex(_) => None,
        }
    }

    /// Magnitude values, computed from the complex values when needed.
    pub fn magnitude(&self) -> Array2<f64> {
        match &self.values {
            SpectrogramValues::Complex(v) => v.mapv(|c| c.norm()),
            SpectrogramValues::Magnitude(v) => v.clone(),
        }
    }

    pub fn to_magnitude(&self) -> Spectrogram {
        Spectrogram {
            values: SpectrogramValues::Magnitude(self.magnitude()),
            config: self.config,
            source_len: self.source_len,
        }
    }
}

fn check_frame_shape(dim: (usize, usize), config: &StftConfig, source_len: usize) -> Result<()> {
    let expected = [config.bins(), config.frame_count(source_len)];
    if dim.0 != expected[0] || dim.1 != expected[1] {
        return Err(Error::shape(&expected, &[dim.0, dim.1]));
    }
    Ok(())
}

/// Time-frequency gain matrix with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Array2<f64>);

impl Mask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::MaskOutOfRange(*v));
        }
        Ok(Mask(values))
    }

    pub fn ones(bins: usize, frames: usize) -> Self {
        Mask(Array2::ones((bins, frames)))
    }

    pub fn zeros(bins: usize, frames: usize) -> Self {
        Mask(Array2::zeros((bins, frames)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Per-frequency standard deviations used to scale spectrogram rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    sigma: Array1<f64>,
}

impl NormStats {
    /// Builds stats from raw deviations, applying [`SIGMA_FLOOR`].
    pub fn new(sigma: Array1<f64>) -> Self {
        Self {
            sigma: sigma.mapv(|s| if s >= SIGMA_FLOOR { s } else { SIGMA_FLOOR }),
        }
    }

    pub fn ones(bins: usize) -> Self {
        Self {
            sigma: Array1::ones(bins),
        }
    }

    pub fn sigma(&self) -> &Array1<f64> {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

type FftCache = Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>;

fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<FftCache> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut plans = plans.lock().expect("fft plan cache poisoned");
    plans
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.len() < cfg.fft_size {
        return Err(Error::WaveformTooShort {
            len: w.len(),
            needed: cfg.fft_size,
        });
    }
    let frames = cfg.frame_count(w.len());
    let bins = cfg.bins();
    let pad = cfg.left_pad();
    let window = cfg.window.coefficients(cfg.fft_size);
    let fft = fft_plan(cfg.fft_size, false);
    let samples = w.samples();

    let mut out = Array2::<Complex64>::zeros((bins, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for j in 0..frames {
        let start = (j * cfg.hop) as isize - pad as isize;
        for (n, slot) in buf.iter_mut().enumerate() {
            let idx = start + n as isize;
            let x = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
            *slot = Complex64::new(x * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            out[[k, j]] = buf[k];
        }
    }
    Spectrogram::from_complex(out, *cfg, w.len())
}

pub fn istft(sp: &Spectrogram, cfg: &StftConfig, sample_rate: u32) -> Result<Waveform> {
    cfg.validate()?;
    if sp.config() != cfg {
        return Err(Error::InvalidStftConfig(
            "spectrogram was produced with a different configuration".into(),
        ));
    }
    let values = sp.as_complex().ok_or(Error::MissingPhase)?;
    let (bins, frames) = values.dim();
    let n_fft = cfg.fft_size;
    let pad = cfg.left_pad();
    let cola = cfg.cola_sum()?;
    let ifft = fft_plan(n_fft, true);

    let total = (frames.saturating_sub(1)) * cfg.hop + n_fft;
    let mut acc = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    for j in 0..frames {
        for k in 0..bins {
            buf[k] = values[[k, j]];
        }
        // Hermitian completion; DC and Nyquist must be real for a real signal.
        buf[0].im = 0.0;
        buf[n_fft / 2].im = 0.0;
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = values[[k, j]].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let offset = j * cfg.hop;
        for (n, c) in buf.iter().enumerate() {
            acc[offset + n] += c.re / n_fft as f64;
        }
    }
    let samples: Vec<f64> = acc[pad..pad + sp.source_len()].iter().map(|v| v / cola).collect();
    Waveform::new(samples, sample_rate)
}

/// Elementwise product with the mask. For complex input the phase is kept.
pub fn apply_mask(sp: &Spectrogram, m: &Mask) -> Result<Spectrogram> {
    if sp.dim() != m.dim() {
        let (a, b) = sp.dim();
        let (c, d) = m.dim();
        return Err(Error::shape(&[a, b], &[c, d]));
    }
    let values = match sp.values() {
        SpectrogramValues::Complex(v) => {
            SpectrogramValues::Complex(Zip::from(v).and(m.values()).map_collect(|c, g| c * *g))
        }
        SpectrogramValues::Magnitude(v) => SpectrogramValues::Magnitude(v * m.values()),
    };
    Ok(Spectrogram {
        values,
        config: sp.config,
        source_len: sp.source_len,
    })
}

/// Elementwise product on raw magnitudes.
pub fn mask_magnitude(x: &Array2<f64>, m: &Mask) -> Result<Array2<f64>> {
    if x.dim() != m.dim() {
        let (a, b) = x.dim();
        let (c, d) = m.dim();
        return Err(Error::shape(&[a, b], &[c, d]));
    }
    Ok(x * m.values())
}

/// Masks the noisy magnitude, keeps the noisy phase, and resynthesizes.
pub fn synthesize_enhanced(noisy: &Spectrogram, m: &Mask, cfg: &StftConfig, sample_rate: u32) -> Result<Waveform> {
    if noisy.kind() != SpectrogramKind::Complex {
        return Err(Error::MissingPhase);
    }
    let masked = apply_mask(noisy, m)?;
    istft(&masked, cfg, sample_rate)
}

/// Recombines a (possibly modified) magnitude with the phase of `phase_source`.
pub fn with_phase_of(magnitude: &Array2<f64>, phase_source: &Spectrogram) -> Result<Spectrogram> {
    let phase = phase_source.as_complex().ok_or(Error::MissingPhase)?;
    if magnitude.dim() != phase.dim() {
        let (a, b) = phase.dim();
        let (c, d) = magnitude.dim();
        return Err(Error::shape(&[a, b], &[c, d]));
    }
    let values = Zip::from(magnitude).and(phase).map_collect(|&mag, c| {
        let norm = c.norm();
        if norm > 0.0 {
            c * (mag / norm)
        } else {
            Complex64::new(mag, 0.0)
        }
    });
    Spectrogram::from_complex(values, *phase_source.config(), phase_source.source_len())
}

fn require_frames(x: &Array2<f64>) -> Result<()> {
    if x.ncols() < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            found: x.ncols(),
        });
    }
    Ok(())
}

/// Subtracts each row's mean over frames (right-multiplication by the
/// centering matrix, without forming it).
pub fn center_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    require_frames(x)?;
    let means = x.mean_axis(Axis(1)).expect("non-empty rows");
    Ok(x - &means.insert_axis(Axis(1)))
}

/// Population standard deviation of each row of an already centered matrix.
pub fn row_std(x_centered: &Array2<f64>) -> NormStats {
    let n = x_centered.ncols().max(1) as f64;
    let sigma = x_centered.map_axis(Axis(1), |row| (row.iter().map(|v| v * v).sum::<f64>() / n).sqrt());
    NormStats::new(sigma)
}

/// Zero-mean, unit-deviation rows plus the deviations used.
pub fn normalize_full(x: &Array2<f64>) -> Result<(Array2<f64>, NormStats)> {
    let centered = center_rows(x)?;
    let stats = row_std(&centered);
    let normalized = divide_rows(&centered, &stats);
    Ok((normalized, stats))
}

/// Divides each row by its deviation without removing the mean.
pub fn normalize_std(x: &Array2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    if stats.len() != x.nrows() {
        return Err(Error::LengthMismatch(stats.len(), x.nrows()));
    }
    Ok(divide_rows(x, stats))
}

fn divide_rows(x: &Array2<f64>, stats: &NormStats) -> Array2<f64> {
    x / &stats.sigma().view().insert_axis(Axis(1))
}

/// Optional amplitude compression applied to magnitudes before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compression {
    #[default]
    None,
    Log1p,
}

impl Compression {
    pub fn apply(self, magnitude: &Array2<f64>) -> Array2<f64> {
        match self {
            Compression::None => magnitude.clone(),
            Compression::Log1p => magnitude.mapv(f64::ln_1p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> StftConfig {
        StftConfig::default()
    }

    #[test]
    fn config_checks() {
        assert!(cfg().validate().is_ok());
        assert_eq!(cfg().bins(), 257);
        assert_abs_diff_eq!(cfg().cola_sum().unwrap(), 1.0, epsilon = 1e-12);
        let bad_hop = StftConfig {
            fft_size: 512,
            hop: 600,
            window: WindowKind::Hann,
        };
        assert!(bad_hop.validate().is_err());
        let not_cola = StftConfig {
            fft_size: 512,
            hop: 300,
            window: WindowKind::Hann,
        };
        assert!(not_cola.validate().is_err());
        let quarter = StftConfig {
            fft_size: 512,
            hop: 128,
            window: WindowKind::Hann,
        };
        assert_abs_diff_eq!(quarter.cola_sum().unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let w = Waveform::silence(4000, 16000).unwrap();
        let sp = stft(&w, &cfg()).unwrap();
        assert_eq!(sp.bins(), 257);
        assert_eq!(sp.frames(), cfg().frame_count(4000));
        assert!(sp.magnitude().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn short_waveform_rejected() {
        let w = Waveform::silence(100, 16000).unwrap();
        assert!(matches!(
            stft(&w, &cfg()),
            Err(Error::WaveformTooShort { len: 100, needed: 512 })
        ));
    }

    #[test]
    fn bin_centred_sinusoid_concentrates_in_one_row() {
        let k = 40usize;
        let samples = (0..16000)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / 512.0).sin())
            .collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let mag = stft(&w, &cfg()).unwrap().magnitude();
        // Interior frame: Hann main lobe is bins k-1..=k+1, peak at k.
        let col = mag.column(mag.ncols() / 2);
        let peak = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, k);
        let total: f64 = col.iter().map(|v| v * v).sum();
        let near: f64 = (k - 1..=k + 1).map(|b| col[b] * col[b]).sum();
        assert!(near / total > 0.999);
    }

    #[test]
    fn round_trip_reconstructs_every_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..16000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let back = istft(&stft(&w, &cfg()).unwrap(), &cfg(), 16000).unwrap();
        assert_eq!(back.len(), w.len());
        let err: f64 = w
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let norm: f64 = w.samples().iter().map(|a| a * a).sum();
        assert!((err / norm).sqrt() < 1e-12);
    }

    #[test]
    fn istft_of_zero_and_magnitude() {
        let c = cfg();
        let zero = Spectrogram::from_complex(Array2::zeros((257, c.frame_count(1024))), c, 1024).unwrap();
        let w = istft(&zero, &c, 16000).unwrap();
        assert!(w.samples().iter().all(|v| *v == 0.0));
        let mag = zero.to_magnitude();
        assert!(matches!(istft(&mag, &c, 16000), Err(Error::MissingPhase)));
    }

    #[test]
    fn single_bin_spectrum_inverts_to_sinusoid() {
        let c = cfg();
        let len = 4096;
        let frames = c.frame_count(len);
        let k = 32usize;
        // Analysis of cos(2 pi k n / 512) with a Hann window has bin-k value 512/4
        // at the frame centre phase; build it directly from a reference signal.
        let reference: Vec<f64> = (0..len)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / 512.0).cos())
            .collect();
        let sp = stft(&Waveform::new(reference.clone(), 16000).unwrap(), &c).unwrap();
        let mut single = Array2::<Complex64>::zeros((257, frames));
        for j in 0..frames {
            for b in k - 1..=k + 1 {
                single[[b, j]] = sp.as_complex().unwrap()[[b, j]];
            }
        }
        let sp1 = Spectrogram::from_complex(single, c, len).unwrap();
        let w = istft(&sp1, &c, 16000).unwrap();
        for (a, b) in w.samples().iter().zip(&reference).skip(512).take(2048) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn mask_examples() {
        let x = array![[2.0, 4.0]];
        let m = Mask::new(array![[0.5, 0.25]]).unwrap();
        assert_eq!(mask_magnitude(&x, &m).unwrap(), array![[1.0, 1.0]]);

        let w = Waveform::new((0..2048).map(|n| (n as f64 * 0.01).sin()).collect(), 16000).unwrap();
        let sp = stft(&w, &cfg()).unwrap();
        let (f, n) = sp.dim();
        assert_eq!(apply_mask(&sp, &Mask::ones(f, n)).unwrap(), sp);
        let zeroed = apply_mask(&sp, &Mask::zeros(f, n)).unwrap();
        assert!(zeroed.magnitude().iter().all(|v| *v == 0.0));
        assert!(apply_mask(&sp, &Mask::ones(f, n + 1)).is_err());
        assert!(Mask::new(array![[1.5]]).is_err());
    }

    #[test]
    fn synthesize_with_identity_and_zero_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Waveform::new((0..8000).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap();
        let sp = stft(&w, &cfg()).unwrap();
        let (f, n) = sp.dim();
        let same = synthesize_enhanced(&sp, &Mask::ones(f, n), &cfg(), 16000).unwrap();
        let direct = istft(&sp, &cfg(), 16000).unwrap();
        for (a, b) in same.samples().iter().zip(direct.samples()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let silent = synthesize_enhanced(&sp, &Mask::zeros(f, n), &cfg(), 16000).unwrap();
        assert!(silent.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn centering_examples() {
        assert_eq!(center_rows(&array![[1.0, 2.0, 3.0]]).unwrap(), array![[-1.0, 0.0, 1.0]]);
        let c = array![[-1.0, 0.0, 1.0]];
        assert_eq!(center_rows(&c).unwrap(), c);
        assert_eq!(
            center_rows(&array![[1.0, 2.0, 3.0], [0.0, 2.0, 4.0]]).unwrap(),
            array![[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0]]
        );
        assert!(matches!(
            center_rows(&array![[1.0]]),
            Err(Error::TooFewFrames { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn row_std_examples() {
        let s = row_std(&array![[-1.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-2.0, 0.0, 2.0]]);
        assert_abs_diff_eq!(s.sigma()[0], (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.sigma()[0], 0.8165, epsilon = 1e-4);
        assert_eq!(s.sigma()[1], SIGMA_FLOOR);
        assert_abs_diff_eq!(s.sigma()[2], 1.63299, epsilon = 1e-5);
    }

    #[test]
    fn normalize_examples() {
        let (xb, _) = normalize_full(&array![[1.0, 2.0, 3.0]]).unwrap();
        let z = 1.5f64.sqrt();
        assert_abs_diff_eq!(xb, array![[-z, 0.0, z]], epsilon = 1e-12);
        assert_abs_diff_eq!(z, 1.2247, epsilon = 1e-4);

        let (xb, stats) = normalize_full(&array![[5.0, 5.0, 5.0]]).unwrap();
        assert!(xb.iter().all(|v| *v == 0.0));
        assert_eq!(stats.sigma()[0], SIGMA_FLOOR);

        let (xb, _) = normalize_full(&array![[1.0, 2.0, 3.0], [0.0, 2.0, 4.0]]).unwrap();
        assert_abs_diff_eq!(xb, array![[-z, 0.0, z], [-z, 0.0, z]], epsilon = 1e-12);
    }

    #[test]
    fn normalize_std_examples() {
        let x = array![[1.0, 2.0, 3.0]];
        let (_, stats) = normalize_full(&x).unwrap();
        let xs = normalize_std(&x, &stats).unwrap();
        assert_abs_diff_eq!(xs, array![[1.2247449, 2.4494897, 3.6742346]], epsilon = 1e-6);
        assert_eq!(normalize_std(&x, &NormStats::ones(1)).unwrap(), x);

        let noisy = array![[1.0, 2.0, 3.0], [0.0, 2.0, 4.0]];
        let (_, stats) = normalize_full(&noisy).unwrap();
        let clean_row = array![[0.0, 2.0, 4.0]];
        let row_stats = NormStats::new(array![stats.sigma()[1]]);
        assert_abs_diff_eq!(
            normalize_std(&clean_row, &row_stats).unwrap(),
            array![[0.0, 1.2247449, 2.4494897]],
            epsilon = 1e-6
        );
        assert!(matches!(
            normalize_std(&x, &NormStats::ones(2)),
            Err(Error::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn silent_input_never_produces_nan() {
        let (xb, stats) = normalize_full(&Array2::zeros((257, 10))).unwrap();
        assert!(xb.iter().all(|v| v.is_finite()));
        let xs = normalize_std(&Array2::zeros((257, 10)), &stats).unwrap();
        assert!(xs.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frame_count_matches_centering() {
        let c = cfg();
        assert_eq!(c.frame_count(512), 3);
        assert_eq!(c.frame_count(4 * 256), 5);
        assert_eq!(c.frame_count(4 * 256 + 1), 6);
    }
}
