use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_backward, conv2d_forward, leaky_backward3, leaky_inplace, leaky_relu, leaky_relu_grad, ConvShape,
};
use super::params::{as_vec, GradView, ParamId, ParamSet};
use super::spectral_norm::{backprop_to_raw, SpectralNormState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub const fn new(filters: usize, kernel: usize) -> Self {
        Self { filters, kernel }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CerEstimatorConfig {
    pub conv: Vec<ConvSpec>,
    /// Hidden dense widths; a single linear output unit follows them.
    pub fc_units: Vec<usize>,
    pub spectral_norm: bool,
    /// Power iterations per training step.
    pub power_iterations: usize,
    /// Upper bound on the power iterations run when the network is created;
    /// they stop early once every sigma estimate has settled.
    pub init_power_iterations: usize,
    pub leaky_slope: f64,
}

impl Default for CerEstimatorConfig {
    fn default() -> Self {
        Self {
            conv: vec![
                ConvSpec::new(75, 5),
                ConvSpec::new(75, 7),
                ConvSpec::new(75, 9),
                ConvSpec::new(75, 11),
            ],
            fc_units: vec![50, 10],
            spectral_norm: true,
            power_iterations: 1,
            init_power_iterations: 500,
            leaky_slope: 0.3,
        }
    }
}

impl CerEstimatorConfig {
    pub fn desk() -> Self {
        Self {
            conv: vec![ConvSpec::new(8, 3); 4],
            fc_units: vec![8, 4],
            ..Self::default()
        }
    }

    /// Width of the pooled feature vector.
    pub fn gap_dim(&self) -> usize {
        self.conv.last().map_or(0, |c| c.filters)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv.is_empty() {
            return Err(Error::InvalidConfig("estimator needs at least one conv layer".into()));
        }
        if self
            .conv
            .iter()
            .any(|c| c.filters == 0 || c.kernel == 0 || c.kernel % 2 == 0)
        {
            return Err(Error::InvalidConfig(
                "conv layers need positive filters and an odd kernel".into(),
            ));
        }
        if self.fc_units.contains(&0) {
            return Err(Error::InvalidConfig("dense widths must be positive".into()));
        }
        Ok(())
    }
}

pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    weight: ParamId,
    bias: ParamId,
}

/// CNN with global average pooling mapping an (evaluated, clean) pair of
/// normalized spectrograms to a CER estimate.
#[derive(Clone, Debug)]
pub struct CerEstimator {
    cfg: CerEstimatorConfig,
    params: ParamSet,
    conv: Vec<(LayerIds, ConvShape)>,
    dense: Vec<LayerIds>,
    sn: Vec<SpectralNormState>,
}

/// Weights as used by one forward pass: divided by their sigma estimate when
/// spectral normalization is on. Conv layers first, then dense layers.
#[derive(Clone, Debug)]
pub struct EstimatorWeights {
    layers: Vec<(Array2<f64>, f64)>,
}

impl EstimatorWeights {
    pub fn matrices(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.layers.iter().map(|(w, _)| w)
    }

    pub fn sigmas(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().map(|(_, s)| *s)
    }
}

#[derive(Clone, Debug)]
pub struct EstimatorCache {
    conv_in: Vec<Array3<f64>>,
    conv_pre: Vec<Array3<f64>>,
    dense_in: Vec<Array1<f64>>,
    dense_pre: Vec<Array1<f64>>,
    output: f64,
}

impl EstimatorCache {
    pub fn output(&self) -> f64 {
        self.output
    }
}

impl CerEstimator {
    pub fn new<R: Rng>(cfg: CerEstimatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut conv = Vec::new();
        let mut channels = INPUT_CHANNELS;
        for (i, spec) in cfg.conv.iter().enumerate() {
            let shape = ConvShape {
                in_channels: channels,
                out_channels: spec.filters,
                kernel: spec.kernel,
            };
            let bound = 1.0 / (shape.patch_len() as f64).sqrt();
            let k = spec.kernel;
            let weight = params.add_uniform(&format!("conv.{i}.weight"), &[spec.filters, channels, k, k], bound, rng);
            let bias = params.add_uniform(&format!("conv.{i}.bias"), &[spec.filters], bound, rng);
            conv.push((LayerIds { weight, bias }, shape));
            channels = spec.filters;
        }
        let mut dense = Vec::new();
        let mut width = channels;
        for (i, &units) in cfg.fc_units.iter().chain(std::iter::once(&1)).enumerate() {
            let bound = 1.0 / (width as f64).sqrt();
            let weight = params.add_uniform(&format!("fc.{i}.weight"), &[units, width], bound, rng);
            let bias = params.add_uniform(&format!("fc.{i}.bias"), &[units], bound, rng);
            dense.push(LayerIds { weight, bias });
            width = units;
        }
        let mut est = Self {
            cfg,
            params,
            conv,
            dense,
            sn: Vec::new(),
        };
        est.sn = est
            .weight_ids()
            .map(|id| SpectralNormState::new(est.params.mat(id), rng))
            .collect();
        est.warm_up();
        Ok(est)
    }

    pub fn config(&self) -> &CerEstimatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn spectral_states(&self) -> &[SpectralNormState] {
        &self.sn
    }

    pub fn spectral_states_mut(&mut self) -> &mut [SpectralNormState] {
        &mut self.sn
    }

    fn weight_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.conv
            .iter()
            .map(|(ids, _)| ids.weight)
            .chain(self.dense.iter().map(|ids| ids.weight))
    }

    /// Advances every singular-vector estimate by the configured step count.
    pub fn power_iterate(&mut self) {
        self.power_iterate_n(self.cfg.power_iterations);
    }

    fn warm_up(&mut self) {
        if !self.cfg.spectral_norm {
            return;
        }
        let ids: Vec<ParamId> = self.weight_ids().collect();
        for (id, state) in ids.into_iter().zip(self.sn.iter_mut()) {
            let w = self.params.mat(id);
            let mut last = state.sigma(w);
            for _ in 0..self.cfg.init_power_iterations {
                state.power_iterate(w, 1);
                let sigma = state.sigma(w);
                if (sigma - last).abs() <= 1e-12 * sigma.abs().max(1e-300) {
                    break;
                }
                last = sigma;
            }
        }
    }

    pub fn power_iterate_n(&mut self, steps: usize) {
        if !self.cfg.spectral_norm {
            return;
        }
        let ids: Vec<ParamId> = self.weight_ids().collect();
        for (id, state) in ids.into_iter().zip(self.sn.iter_mut()) {
            state.power_iterate(self.params.mat(id), steps);
        }
    }

    /// Constrained weights from the current parameters and singular vectors.
    pub fn weights(&self) -> EstimatorWeights {
        let layers = self
            .weight_ids()
            .zip(&self.sn)
            .map(|(id, state)| {
                let w = self.params.mat(id);
                if self.cfg.spectral_norm {
                    super::spectral_norm::normalize_weight(w, state)
                } else {
                    (w.to_owned(), 1.0)
                }
            })
            .collect();
        EstimatorWeights { layers }
    }

    pub fn predict(&self, evaluated: &Array2<f64>, clean: &Array2<f64>) -> Result<f64> {
        Ok(self.forward(&self.weights(), evaluated, clean)?.output)
    }

    pub fn forward(
        &self,
        w: &EstimatorWeights,
        evaluated: &Array2<f64>,
        clean: &Array2<f64>,
    ) -> Result<EstimatorCache> {
        if evaluated.dim() != clean.dim() {
            let (a, b) = (evaluated.dim(), clean.dim());
            return Err(Error::shape(&[b.0, b.1], &[a.0, a.1]));
        }
        let (bins, frames) = evaluated.dim();
        if bins == 0 || frames == 0 {
            return Err(Error::TooFewFrames {
                needed: 1,
                found: frames,
            });
        }
        let slope = self.cfg.leaky_slope;
        let mut x = Array3::<f64>::zeros((INPUT_CHANNELS, bins, frames));
        x.index_axis_mut(Axis(0), 0).assign(evaluated);
        x.index_axis_mut(Axis(0), 1).assign(clean);

        let mut conv_in = Vec::with_capacity(self.conv.len());
        let mut conv_pre = Vec::with_capacity(self.conv.len());
        for (l, (ids, shape)) in self.conv.iter().enumerate() {
            let pre = conv2d_forward(&x, w.layers[l].0.view(), self.params.vec(ids.bias), shape);
            let mut act = pre.clone();
            leaky_inplace(&mut act, slope);
            conv_in.push(std::mem::replace(&mut x, act));
            conv_pre.push(pre);
        }
        let scale = 1.0 / (bins * frames) as f64;
        let mut h: Array1<f64> = x.sum_axis(Axis(2)).sum_axis(Axis(1)) * scale;

        let offset = self.conv.len();
        let last = self.dense.len() - 1;
        let mut dense_in = Vec::with_capacity(self.dense.len());
        let mut dense_pre = Vec::with_capacity(self.dense.len());
        for (l, ids) in self.dense.iter().enumerate() {
            let pre = w.layers[offset + l].0.dot(&h) + self.params.vec(ids.bias);
            let act = if l == last {
                pre.clone()
            } else {
                pre.mapv(|v| leaky_relu(v, slope))
            };
            dense_in.push(std::mem::replace(&mut h, act));
            dense_pre.push(pre);
        }
        let output = h[0];
        Ok(EstimatorCache {
            conv_in,
            conv_pre,
            dense_in,
            dense_pre,
            output,
        })
    }

    /// Backpropagates `dL/doutput`. Gradients w.r.t. the constrained weights
    /// and biases are accumulated into `grads` when given (map them to raw
    /// weights with [`Self::finish_grads`]); the gradient w.r.t. the
    /// evaluated channel is returned when `need_input` is set.
    pub fn backward(
        &self,
        w: &EstimatorWeights,
        cache: &EstimatorCache,
        dout: f64,
        mut grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Array2<f64>> {
        let slope = self.cfg.leaky_slope;
        let offset = self.conv.len();
        let last = self.dense.len() - 1;
        let mut dh = Array1::from_elem(1, dout);
        for (l, ids) in self.dense.iter().enumerate().rev() {
            let pre = &cache.dense_pre[l];
            let dpre = if l == last {
                dh
            } else {
                ndarray::Zip::from(&dh)
                    .and(pre)
                    .map_collect(|d, p| d * leaky_relu_grad(*p, slope))
            };
            if let Some(buf) = grads.as_deref_mut() {
                let mut g = GradView::new(&self.params, buf);
                let [mut gw, gb] = g.many([ids.weight, ids.bias]);
                let input = &cache.dense_in[l];
                gw += &dpre.view().insert_axis(Axis(1)).dot(&input.view().insert_axis(Axis(0)));
                let mut gb = as_vec(gb);
                gb += &dpre;
            }
            dh = w.layers[offset + l].0.t().dot(&dpre);
        }

        let (_, bins, frames) = cache.conv_in[0].dim();
        let scale = 1.0 / (bins * frames) as f64;
        let filters = dh.len();
        let mut dx = Array3::<f64>::zeros((filters, bins, frames));
        for (c, mut plane) in dx.outer_iter_mut().enumerate() {
            plane.fill(dh[c] * scale);
        }
        for (l, (ids, shape)) in self.conv.iter().enumerate().rev() {
            let dpre = leaky_backward3(&cache.conv_pre[l], &dx, slope);
            let need = l > 0 || need_input;
            let din = if let Some(buf) = grads.as_deref_mut() {
                let mut g = GradView::new(&self.params, buf);
                let [gw, gb] = g.many([ids.weight, ids.bias]);
                conv2d_backward(
                    &cache.conv_in[l],
                    w.layers[l].0.view(),
                    &dpre,
                    shape,
                    gw,
                    as_vec(gb),
                    need,
                )
            } else {
                let mut gw = Array2::<f64>::zeros(w.layers[l].0.dim());
                let mut gb = Array1::<f64>::zeros(shape.out_channels);
                conv2d_backward(
                    &cache.conv_in[l],
                    w.layers[l].0.view(),
                    &dpre,
                    shape,
                    gw.view_mut(),
                    gb.view_mut(),
                    need,
                )
            };
            match din {
                Some(d) => dx = d,
                None => return None,
            }
        }
        Some(dx.index_axis(Axis(0), 0).to_owned())
    }

    /// Converts accumulated gradients w.r.t. constrained weights into
    /// gradients w.r.t. the raw parameters, in place.
    pub fn finish_grads(&self, w: &EstimatorWeights, grads: &mut [f64]) {
        if !self.cfg.spectral_norm {
            return;
        }
        let ids: Vec<ParamId> = self.weight_ids().collect();
        let mut g = GradView::new(&self.params, grads);
        for ((id, state), (wn, sigma)) in ids.into_iter().zip(&self.sn).zip(&w.layers) {
            let mut view = g.mat(id);
            let raw = backprop_to_raw(&view.to_owned(), wn, state, *sigma);
            view.assign(&raw);
        }
    }

    /// Upper bound on the global Lipschitz constant (w.r.t. the evaluated
    /// channel) for inputs with `bins * frames` cells, from the given
    /// per-layer spectral norms of the constrained weights.
    pub fn lipschitz_bound(&self, layer_norms: &[f64], bins: usize, frames: usize) -> f64 {
        let conv: f64 = self
            .conv
            .iter()
            .zip(layer_norms)
            .map(|((_, shape), s)| s * shape.kernel as f64)
            .product();
        let dense: f64 = layer_norms[self.conv.len()..].iter().product();
        let slope = self.cfg.leaky_slope.abs().max(1.0);
        let activations = slope.powi((self.conv.len() + self.dense.len() - 1) as i32);
        conv * dense * activations / ((bins * frames) as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> CerEstimatorConfig {
        CerEstimatorConfig {
            conv: vec![ConvSpec::new(3, 3), ConvSpec::new(4, 5)],
            fc_units: vec![5, 3],
            ..CerEstimatorConfig::default()
        }
    }

    fn spec(f: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((f, n), |_| rng.random_range(-2.0..2.0))
    }

    fn svd_top(w: &Array2<f64>) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(w.nrows(), w.ncols(), w.as_slice().unwrap());
        m.singular_values().max()
    }

    #[test]
    fn scalar_for_any_length_and_finite_for_large_inputs() {
        let est = CerEstimator::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for n in [7, 31] {
            assert!(est.predict(&spec(10, n, 1), &spec(10, n, 2)).unwrap().is_finite());
        }
        let big = spec(10, 9, 3) * 500.0;
        assert!(est.predict(&big, &big).unwrap().is_finite());
        assert!(matches!(
            est.predict(&spec(10, 9, 1), &spec(10, 8, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let mut est = CerEstimator::new(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (a, b) = (spec(8, 6, 4), spec(8, 6, 5));
        // L = D^2 so that the chain through the output is exercised.
        let loss = |e: &CerEstimator, a: &Array2<f64>| e.predict(a, &b).unwrap().powi(2);
        let w = est.weights();
        let cache = est.forward(&w, &a, &b).unwrap();
        let mut grads = est.params().zeros();
        let dx = est
            .backward(&w, &cache, 2.0 * cache.output(), Some(&mut grads), true)
            .unwrap();
        est.finish_grads(&w, &mut grads);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-6;
        for _ in 0..25 {
            let i = rng.random_range(0..grads.len());
            let orig = est.params().values()[i];
            est.params_mut().values_mut()[i] = orig + h;
            let lp = loss(&est, &a);
            est.params_mut().values_mut()[i] = orig - h;
            let lm = loss(&est, &a);
            est.params_mut().values_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-7);
            assert!(err < 1e-3, "param {i}: fd {fd} analytic {}", grads[i]);
        }
        for (r, c) in [(0, 0), (4, 3), (7, 5)] {
            let mut ap = a.clone();
            ap[[r, c]] += h;
            let mut am = a.clone();
            am[[r, c]] -= h;
            let fd = (loss(&est, &ap) - loss(&est, &am)) / (2.0 * h);
            assert!(
                (fd - dx[[r, c]]).abs() <= 1e-3 * fd.abs().max(1e-7),
                "{fd} vs {}",
                dx[[r, c]]
            );
        }
    }

    #[test]
    fn backward_without_param_grads_gives_same_input_grad() {
        let est = CerEstimator::new(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, b) = (spec(8, 6, 1), spec(8, 6, 2));
        let w = est.weights();
        let cache = est.forward(&w, &a, &b).unwrap();
        let mut grads = est.params().zeros();
        let with = est.backward(&w, &cache, 1.0, Some(&mut grads), true).unwrap();
        let without = est.backward(&w, &cache, 1.0, None, true).unwrap();
        assert_eq!(with, without);
        assert!(est.backward(&w, &cache, 1.0, None, false).is_none());
    }

    #[test]
    fn constrained_layers_have_unit_norm() {
        let mut est = CerEstimator::new(CerEstimatorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        est.power_iterate_n(5);
        for w in est.weights().matrices() {
            let top = svd_top(w);
            assert!((0.95..=1.01).contains(&top), "{top}");
        }
    }

    #[test]
    fn lipschitz_probe() {
        let est = CerEstimator::new(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let w = est.weights();
        let norms: Vec<f64> = w.matrices().map(svd_top).collect();
        assert!(norms.iter().all(|&s| s <= 1.01), "{norms:?}");
        let (f, n) = (12, 10);
        let bound = est.lipschitz_bound(&norms, f, n);
        let clean = spec(f, n, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let a = Array2::from_shape_fn((f, n), |_| rng.random_range(-3.0..3.0));
            let b = Array2::from_shape_fn((f, n), |_| rng.random_range(-3.0..3.0));
            let da = est.predict(&a, &clean).unwrap();
            let db = est.predict(&b, &clean).unwrap();
            let dist = (&a - &b).mapv(|v| v * v).sum().sqrt();
            assert!((da - db).abs() <= bound * dist * (1.0 + 1e-9));
        }
    }
}
