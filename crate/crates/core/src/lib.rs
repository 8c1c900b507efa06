//! Speech enhancement trained to lower the character error rate of a
//! black-box recognizer.
//!
//! A mask-estimating BLSTM ([`nets::SeModel`]) is trained against a
//! differentiable CER estimator ([`nets::CerEstimator`]); the estimator in
//! turn is fitted to the capped CER the recognizer actually produces. The
//! two are optimized alternately by [`trainer`].

pub mod audio;
pub mod augment;
pub mod datasim;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod recognizer;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use metrics::{cer, edit_alignment, seg_snr, vad, CerScore, EditCounts, FrameSpec, Transcript, VadMask};
pub use spectral::{
    apply_mask, center_rows, istft, normalize_full, normalize_std, row_std, stft, synthesize_enhanced, Mask, NormStats,
    Spectrogram, SpectrogramKind, StftConfig, Waveform,
};
