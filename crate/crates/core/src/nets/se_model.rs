use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    affine, affine_backward, leaky_relu, leaky_relu_grad, lstm_backward, lstm_forward, sigmoid, LstmCache, LstmGrads,
    LstmWeights,
};
use super::params::{as_vec, GradView, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::spectral::Mask;

/// BLSTM mask estimator sizes. The default is the full-size network; the
/// desk preset keeps the topology with fewer units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeModelConfig {
    pub blstm_layers: usize,
    /// Units per direction.
    pub blstm_hidden: usize,
    pub fc1_units: usize,
    pub out_units: usize,
    pub leaky_slope: f64,
}

impl Default for SeModelConfig {
    fn default() -> Self {
        Self {
            blstm_layers: 2,
            blstm_hidden: 200,
            fc1_units: 300,
            out_units: 257,
            leaky_slope: 0.3,
        }
    }
}

impl SeModelConfig {
    pub fn desk() -> Self {
        Self {
            blstm_layers: 2,
            blstm_hidden: 16,
            fc1_units: 32,
            out_units: 257,
            leaky_slope: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blstm_layers == 0 || self.blstm_hidden == 0 || self.fc1_units == 0 || self.out_units == 0 {
            return Err(Error::InvalidConfig("SE model sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct DirIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct SeIds {
    lstm: Vec<[DirIds; 2]>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Mask estimator: stacked BLSTM, a LeakyReLU layer and a sigmoid output
/// layer with one unit per frequency bin.
#[derive(Clone, Debug)]
pub struct SeModel {
    cfg: SeModelConfig,
    params: ParamSet,
    ids: SeIds,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct SeCache {
    layer_inputs: Vec<Array2<f64>>,
    dirs: Vec<[LstmCache; 2]>,
    top: Array2<f64>,
    fc1_pre: Array2<f64>,
    fc1_out: Array2<f64>,
    mask: Array2<f64>,
}

const MASK_EPS: f64 = f64::EPSILON;

impl SeModel {
    pub fn new<R: Rng>(cfg: SeModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let h = cfg.blstm_hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut lstm = Vec::with_capacity(cfg.blstm_layers);
        for layer in 0..cfg.blstm_layers {
            let input = if layer == 0 { cfg.out_units } else { 2 * h };
            let mut dir = |name: &str, rng: &mut R| DirIds {
                w_ih: params.add_uniform(&format!("blstm.{layer}.{name}.w_ih"), &[4 * h, input], bound, rng),
                w_hh: params.add_uniform(&format!("blstm.{layer}.{name}.w_hh"), &[4 * h, h], bound, rng),
                bias: params.add_uniform(&format!("blstm.{layer}.{name}.bias"), &[4 * h], bound, rng),
            };
            let fwd = dir("fwd", rng);
            let bwd = dir("bwd", rng);
            lstm.push([fwd, bwd]);
        }
        let b1 = 1.0 / ((2 * h) as f64).sqrt();
        let fc1_w = params.add_uniform("fc1.weight", &[cfg.fc1_units, 2 * h], b1, rng);
        let fc1_b = params.add_uniform("fc1.bias", &[cfg.fc1_units], b1, rng);
        let b2 = 1.0 / (cfg.fc1_units as f64).sqrt();
        let out_w = params.add_uniform("out.weight", &[cfg.out_units, cfg.fc1_units], b2, rng);
        let out_b = params.add_uniform("out.bias", &[cfg.out_units], b2, rng);
        Ok(Self {
            cfg,
            params,
            ids: SeIds {
                lstm,
                fc1_w,
                fc1_b,
                out_w,
                out_b,
            },
        })
    }

    pub fn config(&self) -> &SeModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn weights(&self, d: &DirIds) -> LstmWeights<'_> {
        LstmWeights {
            w_ih: self.params.mat(d.w_ih),
            w_hh: self.params.mat(d.w_hh),
            bias: self.params.vec(d.bias),
        }
    }

    /// Estimates a mask from the fully normalized noisy spectrogram.
    pub fn forward(&self, x_bar: &Array2<f64>) -> Result<Mask> {
        let cache = self.forward_cached(x_bar)?;
        Mask::new(cache.mask)
    }

    pub fn forward_cached(&self, x_bar: &Array2<f64>) -> Result<SeCache> {
        if x_bar.nrows() != self.cfg.out_units {
            return Err(Error::shape(
                &[self.cfg.out_units, x_bar.ncols()],
                &[x_bar.nrows(), x_bar.ncols()],
            ));
        }
        if x_bar.ncols() == 0 {
            return Err(Error::TooFewFrames { needed: 1, found: 0 });
        }
        let slope = self.cfg.leaky_slope;
        let mut layer_inputs = Vec::with_capacity(self.ids.lstm.len());
        let mut dirs = Vec::with_capacity(self.ids.lstm.len());
        let mut current = x_bar.clone();
        for pair in &self.ids.lstm {
            let fwd = lstm_forward(&self.weights(&pair[0]), current.view(), false);
            let bwd = lstm_forward(&self.weights(&pair[1]), current.view(), true);
            let next = concatenate![Axis(0), *fwd.output(), *bwd.output()];
            layer_inputs.push(std::mem::replace(&mut current, next));
            dirs.push([fwd, bwd]);
        }
        let fc1_pre = affine(
            self.params.mat(self.ids.fc1_w),
            self.params.vec(self.ids.fc1_b),
            current.view(),
        );
        let fc1_out = fc1_pre.mapv(|v| leaky_relu(v, slope));
        let out_pre = affine(
            self.params.mat(self.ids.out_w),
            self.params.vec(self.ids.out_b),
            fc1_out.view(),
        );
        let mask = out_pre.mapv(|v| sigmoid(v).clamp(MASK_EPS, 1.0 - MASK_EPS));
        Ok(SeCache {
            layer_inputs,
            dirs,
            top: current,
            fc1_pre,
            fc1_out,
            mask,
        })
    }

    /// Accumulates `dL/dparams` into `grads` given `dL/dmask`; returns
    /// `dL/dx_bar`.
    pub fn backward(&self, cache: &SeCache, dmask: &Array2<f64>, grads: &mut [f64]) -> Array2<f64> {
        let slope = self.cfg.leaky_slope;
        let mut g = GradView::new(&self.params, grads);
        let d_out_pre = dmask * &cache.mask.mapv(|m| m * (1.0 - m));
        let [gw, gb] = g.many([self.ids.out_w, self.ids.out_b]);
        let d_fc1_out = affine_backward(
            self.params.mat(self.ids.out_w),
            cache.fc1_out.view(),
            d_out_pre.view(),
            gw,
            as_vec(gb),
        );
        let d_fc1_pre = ndarray::Zip::from(&d_fc1_out)
            .and(&cache.fc1_pre)
            .map_collect(|d, p| d * leaky_relu_grad(*p, slope));
        let [gw, gb] = g.many([self.ids.fc1_w, self.ids.fc1_b]);
        let mut d_current = affine_backward(
            self.params.mat(self.ids.fc1_w),
            cache.top.view(),
            d_fc1_pre.view(),
            gw,
            as_vec(gb),
        );
        let h = self.cfg.blstm_hidden;
        for (layer, pair) in self.ids.lstm.iter().enumerate().rev() {
            let input = &cache.layer_inputs[layer];
            let mut d_input = Array2::<f64>::zeros(input.dim());
            for (dir, ids) in pair.iter().enumerate() {
                let dh = d_current.slice(ndarray::s![dir * h..(dir + 1) * h, ..]);
                let [w_ih, w_hh, bias] = g.many([ids.w_ih, ids.w_hh, ids.bias]);
                let grads = LstmGrads {
                    w_ih,
                    w_hh,
                    bias: as_vec(bias),
                };
                d_input += &lstm_backward(&self.weights(ids), input.view(), &cache.dirs[layer][dir], dh, grads);
            }
            d_current = d_input;
        }
        d_current
    }
}

impl SeCache {
    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SeModelConfig {
        SeModelConfig {
            blstm_layers: 2,
            blstm_hidden: 4,
            fc1_units: 4,
            out_units: 6,
            leaky_slope: 0.3,
        }
    }

    fn input(f: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((f, n), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn mask_in_open_unit_interval_for_any_length() {
        let model = SeModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for n in [50, 173] {
            let m = model.forward(&(input(6, n, n as u64) * 100.0)).unwrap();
            assert_eq!(m.values().dim(), (6, n));
            assert!(m.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn rejects_wrong_bin_count() {
        let model = SeModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            model.forward(&input(5, 10, 0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradient_of_mean_mask_matches_finite_differences() {
        let mut model = SeModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = input(6, 9, 3);
        let loss = |m: &SeModel| m.forward_cached(&x).unwrap().mask().mean().unwrap();
        let cache = model.forward_cached(&x).unwrap();
        let dmask = Array2::from_elem(cache.mask().dim(), 1.0 / cache.mask().len() as f64);
        let mut grads = model.params().zeros();
        let dx = model.backward(&cache, &dmask, &mut grads);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..25 {
            let i = rng.random_range(0..grads.len());
            let orig = model.params().values()[i];
            model.params_mut().values_mut()[i] = orig + h;
            let lp = loss(&model);
            model.params_mut().values_mut()[i] = orig - h;
            let lm = loss(&model);
            model.params_mut().values_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(err < 1e-3, "param {i}: fd {fd} analytic {}", grads[i]);
        }
        for (r, c) in [(0, 0), (3, 4), (5, 8)] {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let fp = model.forward_cached(&xp).unwrap().mask().mean().unwrap();
            let fm = model.forward_cached(&xm).unwrap().mask().mean().unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - dx[[r, c]]).abs() <= 1e-3 * fd.abs().max(1e-6),
                "{fd} vs {}",
                dx[[r, c]]
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = SeModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = input(6, 12, 6);
        assert_eq!(model.forward(&x).unwrap(), model.forward(&x).unwrap());
    }
}
