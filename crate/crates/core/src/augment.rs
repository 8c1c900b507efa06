//! Time and frequency masking of magnitude spectrograms.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    #[default]
    Zero,
}

impl Fill {
    fn value(self) -> f64 {
        match self {
            Fill::Zero => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub fill: Fill,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            num_freq_masks: 1,
            max_freq_width: 15,
            num_time_masks: 1,
            max_time_width: 40,
            fill: Fill::Zero,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            num_freq_masks: 0,
            num_time_masks: 0,
            ..Self::default()
        }
    }

    /// Checks the frequency width against the number of bins. The time width
    /// is clamped per utterance since frame counts vary.
    pub fn validate(&self, bins: usize) -> Result<()> {
        if self.num_freq_masks > 0 && self.max_freq_width >= bins {
            return Err(Error::InvalidConfig(format!(
                "max_freq_width {} must be below the bin count {bins}",
                self.max_freq_width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

/// One masked block: `width` consecutive rows or columns starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskRegion {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Draws the mask regions for an `bins x frames` input. Frequency masks are
/// drawn first, then time masks, each as width then start.
pub fn sample_regions(cfg: &AugmentConfig, bins: usize, frames: usize, seed: u64) -> Result<Vec<MaskRegion>> {
    cfg.validate(bins)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut regions = Vec::with_capacity(cfg.num_freq_masks + cfg.num_time_masks);
    let mut draw = |axis, count: usize, max_width: usize, dim: usize, rng: &mut ChaCha8Rng| {
        let max_width = max_width.min(dim.saturating_sub(1));
        for _ in 0..count {
            let width = rng.random_range(0..=max_width);
            let start = rng.random_range(0..=dim - width);
            regions.push(MaskRegion { axis, start, width });
        }
    };
    draw(
        MaskAxis::Frequency,
        cfg.num_freq_masks,
        cfg.max_freq_width,
        bins,
        &mut rng,
    );
    draw(MaskAxis::Time, cfg.num_time_masks, cfg.max_time_width, frames, &mut rng);
    Ok(regions)
}

pub fn apply_regions(spec: &Array2<f64>, regions: &[MaskRegion], fill: Fill) -> Array2<f64> {
    let mut out = spec.clone();
    for r in regions {
        let end = r.start + r.width;
        match r.axis {
            MaskAxis::Frequency => out.slice_mut(s![r.start..end, ..]).fill(fill.value()),
            MaskAxis::Time => out.slice_mut(s![.., r.start..end]).fill(fill.value()),
        }
    }
    out
}

/// Masks random frequency bands and time spans of a magnitude spectrogram.
/// Deterministic for a given seed.
pub fn apply_specaugment(spec: &Array2<f64>, cfg: &AugmentConfig, seed: u64) -> Result<Array2<f64>> {
    if spec.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidConfig(
            "specaugment expects a magnitude spectrogram".into(),
        ));
    }
    let (bins, frames) = spec.dim();
    let regions = sample_regions(cfg, bins, frames, seed)?;
    Ok(apply_regions(spec, &regions, cfg.fill))
}
