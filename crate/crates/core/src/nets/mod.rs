//! The mask-estimating SE network and the spectrally normalized CER
//! estimator, with hand-written backpropagation over flat parameter sets.

pub mod adam;
pub mod checkpoint;
pub mod estimator;
pub mod layers;
pub mod params;
pub mod se_model;
pub mod spectral_norm;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{config_hash, ParameterSnapshot};
pub use estimator::{CerEstimator, CerEstimatorConfig, ConvSpec, EstimatorCache, EstimatorWeights};
pub use params::{ParamId, ParamSet, ParamSpec};
pub use se_model::{SeCache, SeModel, SeModelConfig};
pub use spectral_norm::{apply_spectral_norm, SpectralNormState};
