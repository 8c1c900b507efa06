//! Spectral normalization: weights are divided by their leading singular
//! value, estimated by power iteration with persistent singular vectors.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

const NORM_EPS: f64 = 1e-12;

/// Persistent left/right singular-vector estimates for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

fn normalized(x: Array1<f64>) -> Array1<f64> {
    let n = x.dot(&x).sqrt();
    x / (n + NORM_EPS)
}

impl SpectralNormState {
    /// Random unit `u`, with `v` derived from it.
    pub fn new<R: Rng>(weight: ArrayView2<f64>, rng: &mut R) -> Self {
        let u = normalized(Array1::from_shape_fn(weight.nrows(), |_| rng.random_range(-1.0..1.0)));
        let v = normalized(weight.t().dot(&u));
        Self { u, v }
    }

    /// Runs `steps` power iterations, updating `u` and `v` in place.
    pub fn power_iterate(&mut self, weight: ArrayView2<f64>, steps: usize) {
        for _ in 0..steps {
            self.v = normalized(weight.t().dot(&self.u));
            self.u = normalized(weight.dot(&self.v));
        }
    }

    /// Current estimate `u^T W v` of the leading singular value.
    pub fn sigma(&self, weight: ArrayView2<f64>) -> f64 {
        self.u.dot(&weight.dot(&self.v))
    }
}

/// `W / max(sigma, eps)` with the sigma estimate from the current state.
pub fn normalize_weight(weight: ArrayView2<f64>, state: &SpectralNormState) -> (Array2<f64>, f64) {
    let sigma = state.sigma(weight);
    (weight.to_owned() / sigma.max(NORM_EPS), sigma)
}

/// Power-iterates and returns the constrained weight.
pub fn apply_spectral_norm(weight: ArrayView2<f64>, state: &mut SpectralNormState, steps: usize) -> Array2<f64> {
    state.power_iterate(weight, steps);
    normalize_weight(weight, state).0
}

/// Maps the gradient w.r.t. the normalized weight back to the raw weight,
/// holding `u` and `v` fixed: `(G - <G, W_sn> u v^T) / sigma`.
pub fn backprop_to_raw(
    grad_normalized: &Array2<f64>,
    normalized: &Array2<f64>,
    state: &SpectralNormState,
    sigma: f64,
) -> Array2<f64> {
    if sigma <= NORM_EPS {
        return grad_normalized / NORM_EPS;
    }
    let inner: f64 = grad_normalized.iter().zip(normalized.iter()).map(|(g, w)| g * w).sum();
    let uv = state
        .u
        .view()
        .insert_axis(ndarray::Axis(1))
        .dot(&state.v.view().insert_axis(ndarray::Axis(0)));
    (grad_normalized - &(uv * inner)) / sigma
}
