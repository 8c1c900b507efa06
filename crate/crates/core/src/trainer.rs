//! Alternating optimization of the CER estimator and the SE model.
//!
//! Each epoch starts by running the current SE model over the training set
//! and scoring the noisy, clean, enhanced and augmented signals with the
//! recognizer (through the cached [`QScorer`]). Batches then alternate
//! estimator steps, which regress the estimator onto those scores, with SE
//! steps, which push the estimator's output on enhanced speech towards zero.
//! The SE step never sees the scorer.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_specaugment, AugmentConfig};
use crate::error::{Error, Result};
use crate::metrics::{seg_snr, CerScore, FrameSpec, Transcript};
use crate::nets::checkpoint::{config_hash, ParameterSnapshot};
use crate::nets::{Adam, AdamConfig, CerEstimator, CerEstimatorConfig, EstimatorWeights, SeModel, SeModelConfig};
use crate::recognizer::QScorer;
use crate::spectral::{
    istft, normalize_full, normalize_std, stft, synthesize_enhanced, with_phase_of, Mask, NormStats, Spectrogram,
    StftConfig, Waveform,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_cer: f64,
    pub lr_se: f64,
    /// Estimator steps per batch.
    pub cer_steps: usize,
    /// SE steps per batch, run after the estimator steps.
    pub se_steps: usize,
    /// Augmented copies of the noisy and of the enhanced spectrogram added
    /// as extra estimator pairs per sample.
    pub augment_copies: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Epochs of past enhanced pairs kept as extra estimator pairs; 0 keeps none.
    pub replay_history: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_cer: 1e-4,
            lr_se: 1e-4,
            cer_steps: 1,
            se_steps: 1,
            augment_copies: 1,
            seed: 0,
            adam: AdamConfig::default(),
            replay_history: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule used with [`ModelConfig::desk`].
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            lr_cer: 1e-3,
            lr_se: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr_cer > 0.0 && self.lr_se > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.cer_steps == 0 || self.se_steps == 0 {
            return bad("alternation step counts must be at least 1");
        }
        Ok(())
    }
}

/// Everything that determines the shape and meaning of trained parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stft: StftConfig,
    pub se: SeModelConfig,
    pub estimator: CerEstimatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            se: SeModelConfig::default(),
            estimator: CerEstimatorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            stft: StftConfig::default(),
            se: SeModelConfig::desk(),
            estimator: CerEstimatorConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.se.validate()?;
        self.estimator.validate()?;
        if self.se.out_units != self.stft.bins() {
            return Err(Error::InvalidConfig(format!(
                "SE output units ({}) must equal the STFT bin count ({})",
                self.se.out_units,
                self.stft.bins()
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// A training triplet with its spectral forms precomputed.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub noisy: Waveform,
    pub clean: Waveform,
    pub transcript: Transcript,
    /// Complex noisy spectrogram (phase source for resynthesis).
    pub noisy_spec: Spectrogram,
    /// Noisy magnitude `X`.
    pub x: Array2<f64>,
    /// Fully normalized noisy magnitude, the SE input.
    pub x_bar: Array2<f64>,
    /// Row deviations of the noisy magnitude.
    pub stats: NormStats,
    pub x_std: Array2<f64>,
    /// Clean magnitude divided by the noisy deviations.
    pub s_std: Array2<f64>,
}

impl TrainSample {
    pub fn prepare(
        id: impl Into<String>,
        noisy: Waveform,
        clean: Waveform,
        transcript: Transcript,
        cfg: &StftConfig,
    ) -> Result<Self> {
        if transcript.is_empty() {
            return Err(Error::EmptyReference);
        }
        if noisy.len() != clean.len() {
            return Err(Error::LengthMismatch(noisy.len(), clean.len()));
        }
        let noisy_spec = stft(&noisy, cfg)?;
        let x = noisy_spec.magnitude();
        let (x_bar, stats) = normalize_full(&x)?;
        let x_std = normalize_std(&x, &stats)?;
        let s_std = normalize_std(&stft(&clean, cfg)?.magnitude(), &stats)?;
        Ok(Self {
            id: id.into(),
            noisy,
            clean,
            transcript,
            noisy_spec,
            x,
            x_bar,
            stats,
            x_std,
            s_std,
        })
    }

    /// Enhanced waveform and std-normalized enhanced magnitude for `mask`.
    pub fn enhance_with(&self, mask: &Mask, cfg: &StftConfig) -> Result<(Waveform, Array2<f64>)> {
        let wave = synthesize_enhanced(&self.noisy_spec, mask, cfg, self.noisy.sample_rate())?;
        Ok((wave, &self.x_std * mask.values()))
    }
}

/// One regression pair for the estimator: `D(input, s_std) ≈ target`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorTerm {
    pub input: Array2<f64>,
    pub target: f64,
}

/// Estimator pairs of one sample: noisy, clean, enhanced, then augmented
/// copies and replayed enhanced pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTerms {
    pub sample: usize,
    pub terms: Vec<EstimatorTerm>,
}

impl SampleTerms {
    pub const NOISY: usize = 0;
    pub const CLEAN: usize = 1;
    pub const ENHANCED: usize = 2;
}

fn check_batch<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Empty("batch"))
    } else {
        Ok(())
    }
}

/// Mean over the batch of the summed squared errors of every pair.
pub fn cer_estimator_loss(est: &CerEstimator, samples: &[TrainSample], batch: &[SampleTerms]) -> Result<f64> {
    check_batch(batch)?;
    let w = est.weights();
    let mut total = 0.0;
    for st in batch {
        let reference = &samples[st.sample].s_std;
        for t in &st.terms {
            let d = est.forward(&w, &t.input, reference)?.output();
            total += (d - t.target).powi(2);
        }
    }
    Ok(total / batch.len() as f64)
}

/// [`cer_estimator_loss`] and its gradient w.r.t. the estimator's raw
/// parameters, with the singular vectors held fixed.
pub fn cer_estimator_loss_grad(
    est: &CerEstimator,
    w: &EstimatorWeights,
    samples: &[TrainSample],
    batch: &[SampleTerms],
) -> Result<(f64, Vec<f64>)> {
    check_batch(batch)?;
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|st| {
            let reference = &samples[st.sample].s_std;
            let mut grads = est.params().zeros();
            let mut loss = 0.0;
            for t in &st.terms {
                let cache = est.forward(w, &t.input, reference)?;
                let err = cache.output() - t.target;
                loss += err * err * scale;
                est.backward(w, &cache, 2.0 * err * scale, Some(&mut grads), false);
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, mut grads) = sum_parts(parts, est.params().len());
    est.finish_grads(w, &mut grads);
    Ok((loss, grads))
}

fn sum_parts(parts: Vec<(f64, Vec<f64>)>, len: usize) -> (f64, Vec<f64>) {
    let mut grads = vec![0.0; len];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    (loss, grads)
}

/// Mean squared estimator output on (enhanced, clean) pairs.
pub fn se_loss(se: &SeModel, est: &CerEstimator, samples: &[TrainSample], batch: &[usize]) -> Result<f64> {
    check_batch(batch)?;
    let w = est.weights();
    let mut total = 0.0;
    for &i in batch {
        let s = &samples[i];
        let mask = se.forward(&s.x_bar)?;
        let d = est.forward(&w, &(&s.x_std * mask.values()), &s.s_std)?.output();
        total += d * d;
    }
    Ok(total / batch.len() as f64)
}

/// [`se_loss`] and its gradient w.r.t. the SE parameters.
pub fn se_loss_grad(
    se: &SeModel,
    est: &CerEstimator,
    w: &EstimatorWeights,
    samples: &[TrainSample],
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_batch(batch)?;
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let cache = se.forward_cached(&s.x_bar)?;
            let enhanced = &s.x_std * cache.mask();
            let out = est.forward(w, &enhanced, &s.s_std)?;
            let d = out.output();
            let d_input = est
                .backward(w, &out, 2.0 * d * scale, None, true)
                .expect("input gradient requested");
            let dmask = d_input * &s.x_std;
            let mut grads = se.params().zeros();
            se.backward(&cache, &dmask, &mut grads);
            Ok((d * d * scale, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_parts(parts, se.params().len()))
}

/// Per-epoch summary; serialized as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_cer: f64,
    pub loss_se: f64,
    pub estimator_steps: usize,
    pub se_steps: usize,
    pub recognizer_calls: usize,
    pub val_estimator_mae: Option<f64>,
    pub val_cer_noisy: Option<f64>,
    pub val_cer_enhanced: Option<f64>,
}

pub const CURVE_CSV_HEADER: &str = "epoch,loss_cer,loss_se,val_estimator_mae,val_cer_noisy,val_cer_enhanced";

impl EpochReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.loss_cer,
            self.loss_se,
            opt(self.val_estimator_mae),
            opt(self.val_cer_noisy),
            opt(self.val_cer_enhanced)
        )
    }
}

/// Which optimization phase a step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Estimator,
    Se,
}

/// Models, optimizers and schedule state for alternating training.
pub struct Trainer {
    cfg: TrainConfig,
    model: ModelConfig,
    augment: AugmentConfig,
    se: SeModel,
    est: CerEstimator,
    se_opt: Adam,
    est_opt: Adam,
    scorer: Arc<QScorer>,
    epoch: usize,
    step: usize,
    replay: Vec<VecDeque<EstimatorTerm>>,
    observer: Option<Box<dyn FnMut(Phase, &SeModel, &CerEstimator) + Send + Sync>>,
}

const SE_STREAM: u64 = 1 << 32;
const EST_STREAM: u64 = 2 << 32;

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelConfig, augment: AugmentConfig, scorer: Arc<QScorer>) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        augment.validate(model.stft.bins())?;
        let stream_rng = |stream| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(stream);
            r
        };
        let se = SeModel::new(model.se.clone(), &mut stream_rng(SE_STREAM))?;
        let est = CerEstimator::new(model.estimator.clone(), &mut stream_rng(EST_STREAM))?;
        let se_opt = Adam::new(se.params().len(), cfg.lr_se, cfg.adam);
        let est_opt = Adam::new(est.params().len(), cfg.lr_cer, cfg.adam);
        Ok(Self {
            cfg,
            model,
            augment,
            se,
            est,
            se_opt,
            est_opt,
            scorer,
            epoch: 0,
            step: 0,
            replay: Vec::new(),
            observer: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn se(&self) -> &SeModel {
        &self.se
    }

    pub fn estimator(&self) -> &CerEstimator {
        &self.est
    }

    pub fn scorer(&self) -> &Arc<QScorer> {
        &self.scorer
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Called after every optimization step with the phase just run.
    pub fn set_observer(&mut self, f: impl FnMut(Phase, &SeModel, &CerEstimator) + Send + Sync + 'static) {
        self.observer = Some(Box::new(f));
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(self.epoch as u64 + 1);
        r
    }

    /// Scores every sample under the current SE model and assembles the
    /// estimator pairs for this epoch.
    pub fn build_terms(&self, samples: &[TrainSample], aug_seeds: &[u64]) -> Result<Vec<SampleTerms>> {
        let stft_cfg = self.model.stft;
        let copies = self.cfg.augment_copies;
        struct Pending {
            inputs: Vec<Array2<f64>>,
            waves: Vec<Waveform>,
        }
        let pending = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let rate = s.noisy.sample_rate();
                let mask = self.se.forward(&s.x_bar)?;
                let (enh_wave, enh_std) = s.enhance_with(&mask, &stft_cfg)?;
                let mut inputs = vec![s.x_std.clone(), s.s_std.clone(), enh_std];
                let mut waves = vec![s.noisy.clone(), s.clean.clone(), enh_wave];
                let enh_mag = &s.x * mask.values();
                for c in 0..copies {
                    for (k, mag) in [&s.x, &enh_mag].into_iter().enumerate() {
                        let seed = aug_seeds[i * 2 * copies + 2 * c + k];
                        let aug = apply_specaugment(mag, &self.augment, seed)?;
                        let wave = istft(&with_phase_of(&aug, &s.noisy_spec)?, &stft_cfg, rate)?;
                        inputs.push(normalize_std(&aug, &s.stats)?);
                        waves.push(wave);
                    }
                }
                Ok(Pending { inputs, waves })
            })
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<(&Waveform, &Transcript)> = pending
            .iter()
            .zip(samples)
            .flat_map(|(p, s)| p.waves.iter().map(move |w| (w, &s.transcript)))
            .collect();
        let scores = self.scorer.score_batch(&items)?;
        let mut scores = scores.into_iter();
        Ok(pending
            .into_iter()
            .enumerate()
            .map(|(i, p)| SampleTerms {
                sample: i,
                terms: p
                    .inputs
                    .into_iter()
                    .map(|input| EstimatorTerm {
                        input,
                        target: scores.next().expect("one score per wave").value,
                    })
                    .collect(),
            })
            .collect())
    }

    /// One estimator update on `batch`; the SE model is not touched.
    pub fn estimator_step(&mut self, samples: &[TrainSample], batch: &[SampleTerms]) -> Result<f64> {
        self.est.power_iterate();
        let w = self.est.weights();
        let (loss, grads) = cer_estimator_loss_grad(&self.est, &w, samples, batch)?;
        self.check_finite("loss_cer", loss)?;
        self.est_opt.step(self.est.params_mut().values_mut(), &grads);
        Ok(loss)
    }

    /// One SE update on `batch`; neither the estimator nor the scorer is used
    /// beyond a read-only forward/backward pass.
    pub fn se_step(&mut self, samples: &[TrainSample], batch: &[usize]) -> Result<f64> {
        let w = self.est.weights();
        let (loss, grads) = se_loss_grad(&self.se, &self.est, &w, samples, batch)?;
        self.check_finite("loss_se", loss)?;
        self.se_opt.step(self.se.params_mut().values_mut(), &grads);
        Ok(loss)
    }

    fn check_finite(&self, name: &'static str, value: f64) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
                loss_name: name,
                value,
            })
        }
    }

    fn observe(&mut self, phase: Phase) {
        if let Some(f) = self.observer.as_mut() {
            f(phase, &self.se, &self.est);
        }
    }

    /// Runs one epoch over `train` and validates on `val` (may be empty).
    pub fn train_epoch(&mut self, train: &[TrainSample], val: &[TrainSample]) -> Result<EpochReport> {
        check_batch(train)?;
        let calls_before = self.scorer.invocations();
        let mut rng = self.epoch_rng();
        let aug_seeds: Vec<u64> = (0..train.len() * 2 * self.cfg.augment_copies)
            .map(|_| rng.random())
            .collect();
        let mut terms = self.build_terms(train, &aug_seeds)?;
        if self.cfg.replay_history > 0 {
            self.replay.resize_with(train.len(), VecDeque::new);
            for (st, history) in terms.iter_mut().zip(self.replay.iter_mut()) {
                let current = st.terms[SampleTerms::ENHANCED].clone();
                st.terms.extend(history.iter().cloned());
                history.push_front(current);
                history.truncate(self.cfg.replay_history);
            }
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let (mut cer_sum, mut cer_n, mut se_sum, mut se_n) = (0.0, 0, 0.0, 0);
        for batch in order.chunks(self.cfg.batch_size) {
            let batch_terms: Vec<SampleTerms> = batch.iter().map(|&i| terms[i].clone()).collect();
            for _ in 0..self.cfg.cer_steps {
                let frozen = cfg!(debug_assertions).then(|| self.se.params().clone());
                cer_sum += self.estimator_step(train, &batch_terms)?;
                cer_n += 1;
                self.step += 1;
                debug_assert!(
                    frozen.is_none_or(|p| &p == self.se.params()),
                    "SE changed in estimator phase"
                );
                self.observe(Phase::Estimator);
            }
            for _ in 0..self.cfg.se_steps {
                let frozen = cfg!(debug_assertions).then(|| self.est.params().clone());
                let calls = self.scorer.invocations();
                se_sum += self.se_step(train, batch)?;
                se_n += 1;
                self.step += 1;
                debug_assert!(
                    frozen.is_none_or(|p| &p == self.est.params()),
                    "estimator changed in SE phase"
                );
                debug_assert_eq!(calls, self.scorer.invocations(), "recognizer used in SE phase");
                self.observe(Phase::Se);
            }
        }

        let (mae, cer_noisy, cer_enh) = if val.is_empty() {
            (None, None, None)
        } else {
            let v = self.validate(val)?;
            (Some(v.0), Some(v.1), Some(v.2))
        };
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            loss_cer: cer_sum / cer_n.max(1) as f64,
            loss_se: se_sum / se_n.max(1) as f64,
            estimator_steps: cer_n,
            se_steps: se_n,
            recognizer_calls: self.scorer.invocations() - calls_before,
            val_estimator_mae: mae,
            val_cer_noisy: cer_noisy,
            val_cer_enhanced: cer_enh,
        })
    }

    /// Estimator MAE against the true score on noisy and enhanced pairs,
    /// and the mean true score of noisy and enhanced audio.
    pub fn validate(&self, val: &[TrainSample]) -> Result<(f64, f64, f64)> {
        let preds = self.predictions(val)?;
        let n = val.len() as f64;
        let mae = preds
            .iter()
            .map(|p| (p.pred_noisy - p.q_noisy).abs() + (p.pred_enhanced - p.q_enhanced).abs())
            .sum::<f64>()
            / (2.0 * n);
        let noisy = preds.iter().map(|p| p.q_noisy).sum::<f64>() / n;
        let enhanced = preds.iter().map(|p| p.q_enhanced).sum::<f64>() / n;
        Ok((mae, noisy, enhanced))
    }

    /// Estimator outputs next to true scores for each sample.
    pub fn predictions(&self, samples: &[TrainSample]) -> Result<Vec<Prediction>> {
        let stft_cfg = self.model.stft;
        let w = self.est.weights();
        let staged = samples
            .par_iter()
            .map(|s| {
                let mask = self.se.forward(&s.x_bar)?;
                let (wave, enh_std) = s.enhance_with(&mask, &stft_cfg)?;
                let pred_noisy = self.est.forward(&w, &s.x_std, &s.s_std)?.output();
                let pred_enhanced = self.est.forward(&w, &enh_std, &s.s_std)?.output();
                Ok((wave, pred_noisy, pred_enhanced))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut items = Vec::with_capacity(samples.len() * 2);
        for (s, (wave, _, _)) in samples.iter().zip(&staged) {
            items.push((&s.noisy, &s.transcript));
            items.push((wave, &s.transcript));
        }
        let q = self.scorer.score_batch(&items)?;
        Ok(staged
            .iter()
            .enumerate()
            .map(|(i, (_, pn, pe))| Prediction {
                pred_noisy: *pn,
                pred_enhanced: *pe,
                q_noisy: q[2 * i].value,
                q_enhanced: q[2 * i + 1].value,
            })
            .collect())
    }

    /// Trains for the configured number of epochs, calling `on_epoch` after
    /// each one.
    pub fn fit(
        &mut self,
        train: &[TrainSample],
        val: &[TrainSample],
        mut on_epoch: impl FnMut(&Trainer, &EpochReport) -> Result<()>,
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while self.epoch < self.cfg.epochs {
            let r = self.train_epoch(train, val)?;
            on_epoch(self, &r)?;
            reports.push(r);
        }
        Ok(reports)
    }

    /// Parameters, singular vectors, optimizer state and schedule position.
    pub fn snapshot(&self) -> ParameterSnapshot {
        let mut snap = ParameterSnapshot::new(
            self.model.hash(),
            serde_json::json!({
                "epoch": self.epoch,
                "step": self.step,
                "model": self.model,
                "train": self.cfg,
                "augment": self.augment,
            }),
        );
        snap.push_params("se", self.se.params());
        snap.push_params("est", self.est.params());
        for (i, st) in self.est.spectral_states().iter().enumerate() {
            snap.push(format!("est_sn.{i}.u"), vec![st.u.len()], st.u.to_vec());
            snap.push(format!("est_sn.{i}.v"), vec![st.v.len()], st.v.to_vec());
        }
        for (name, opt, params) in [
            ("se", &self.se_opt, self.se.params()),
            ("est", &self.est_opt, self.est.params()),
        ] {
            let (m, v) = opt.moments();
            snap.push_flat(&format!("adam_{name}_m"), params, m);
            snap.push_flat(&format!("adam_{name}_v"), params, v);
            snap.push(format!("adam_{name}_t"), vec![], vec![opt.steps() as f64]);
        }
        snap
    }

    /// Restores a snapshot taken from a trainer with the same model config.
    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<()> {
        let expected = self.model.hash();
        if snap.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: snap.config_hash.clone(),
            });
        }
        snap.restore_params("se", self.se.params_mut())?;
        snap.restore_params("est", self.est.params_mut())?;
        for (i, st) in self.est.spectral_states_mut().iter_mut().enumerate() {
            st.u = snap.get(&format!("est_sn.{i}.u"))?.data.clone().into();
            st.v = snap.get(&format!("est_sn.{i}.v"))?.data.clone().into();
        }
        for (name, opt, params) in [
            ("se", &mut self.se_opt, self.se.params()),
            ("est", &mut self.est_opt, self.est.params()),
        ] {
            let m = snap.read_flat(&format!("adam_{name}_m"), params)?;
            let v = snap.read_flat(&format!("adam_{name}_v"), params)?;
            let t = snap.get(&format!("adam_{name}_t"))?.data[0] as u64;
            opt.set_state(m, v, t);
        }
        let counter = |key: &str| {
            snap.meta
                .get(key)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing {key} in metadata")))
        };
        self.epoch = counter("epoch")? as usize;
        self.step = counter("step")? as usize;
        self.replay.clear();
        Ok(())
    }
}

/// Loads only the SE model from a training snapshot.
pub fn load_se_model(snap: &ParameterSnapshot, model: &ModelConfig) -> Result<SeModel> {
    let expected = model.hash();
    if snap.config_hash != expected {
        return Err(Error::ConfigHashMismatch {
            expected,
            found: snap.config_hash.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut se = SeModel::new(model.se.clone(), &mut rng)?;
    snap.restore_params("se", se.params_mut())?;
    Ok(se)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub pred_noisy: f64,
    pub pred_enhanced: f64,
    pub q_noisy: f64,
    pub q_enhanced: f64,
}

/// Enhances one waveform with the SE model.
pub fn enhance(se: &SeModel, noisy: &Waveform, cfg: &StftConfig) -> Result<Waveform> {
    let spec = stft(noisy, cfg)?;
    let (x_bar, _) = normalize_full(&spec.magnitude())?;
    let mask = se.forward(&x_bar)?;
    let mut out = synthesize_enhanced(&spec, &mask, cfg, noisy.sample_rate())?;
    out.samples_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(out)
}

/// Extra per-utterance metric computed on (clean, enhanced) audio.
pub trait PairMetric: Send + Sync {
    fn name(&self) -> String;
    fn score(&self, clean: &Waveform, processed: &Waveform) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub cer_noisy: f64,
    pub cer_enhanced: f64,
    pub seg_snr_noisy: f64,
    pub seg_snr_enhanced: f64,
    /// Extra metrics on the enhanced audio; `None` where not computed.
    pub extra: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_cer_noisy: f64,
    pub mean_cer_enhanced: f64,
    /// Total edits over total reference characters.
    pub pooled_cer_noisy: f64,
    pub pooled_cer_enhanced: f64,
    pub mean_seg_snr_noisy: f64,
    pub mean_seg_snr_enhanced: f64,
}

impl EvalReport {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "utterances": self.rows.len(),
            "mean_cer_noisy": self.mean_cer_noisy,
            "mean_cer_enhanced": self.mean_cer_enhanced,
            "pooled_cer_noisy": self.pooled_cer_noisy,
            "pooled_cer_enhanced": self.pooled_cer_enhanced,
            "mean_seg_snr_noisy": self.mean_seg_snr_noisy,
            "mean_seg_snr_enhanced": self.mean_seg_snr_enhanced,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }
}

/// Scores noisy and mask-enhanced audio for every sample.
pub fn evaluate_masks(
    samples: &[TrainSample],
    masks: &[Mask],
    scorer: &QScorer,
    cfg: &StftConfig,
    extra: &[&dyn PairMetric],
) -> Result<EvalReport> {
    check_batch(samples)?;
    if masks.len() != samples.len() {
        return Err(Error::LengthMismatch(samples.len(), masks.len()));
    }
    let frames = FrameSpec::from(cfg);
    let enhanced: Vec<Waveform> = samples
        .par_iter()
        .zip(masks)
        .map(|(s, m)| s.enhance_with(m, cfg).map(|(w, _)| w))
        .collect::<Result<_>>()?;
    let mut items = Vec::with_capacity(samples.len() * 2);
    for (s, e) in samples.iter().zip(&enhanced) {
        items.push((&s.noisy, &s.transcript));
        items.push((e, &s.transcript));
    }
    let q = scorer.score_batch(&items)?;
    let rows = samples
        .iter()
        .zip(&enhanced)
        .enumerate()
        .map(|(i, (s, e))| {
            let extra = extra
                .iter()
                .map(|m| Ok((m.name(), Some(m.score(&s.clean, e)?))))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(EvalRow {
                id: s.id.clone(),
                cer_noisy: q[2 * i].value,
                cer_enhanced: q[2 * i + 1].value,
                seg_snr_noisy: seg_snr(&s.clean, &s.noisy, frames)?,
                seg_snr_enhanced: seg_snr(&s.clean, e, frames)?,
                extra,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let ref_chars: usize = samples.iter().map(|s| s.transcript.len()).sum();
    let pooled = |offset: usize| {
        let edits: usize = q
            .iter()
            .skip(offset)
            .step_by(2)
            .map(|c: &CerScore| c.counts().total())
            .sum();
        edits as f64 / ref_chars as f64
    };
    Ok(EvalReport {
        mean_cer_noisy: mean(|r| r.cer_noisy),
        mean_cer_enhanced: mean(|r| r.cer_enhanced),
        pooled_cer_noisy: pooled(0),
        pooled_cer_enhanced: pooled(1),
        mean_seg_snr_noisy: mean(|r| r.seg_snr_noisy),
        mean_seg_snr_enhanced: mean(|r| r.seg_snr_enhanced),
        rows,
    })
}

/// Scores noisy audio against audio enhanced by `se`.
pub fn evaluate(
    se: &SeModel,
    samples: &[TrainSample],
    scorer: &QScorer,
    cfg: &StftConfig,
    extra: &[&dyn PairMetric],
) -> Result<EvalReport> {
    let masks = samples
        .par_iter()
        .map(|s| se.forward(&s.x_bar))
        .collect::<Result<Vec<_>>>()?;
    evaluate_masks(samples, &masks, scorer, cfg, extra)
}

/// `|S| / |X|` clipped to `[0, 1]`.
pub fn oracle_mask(sample: &TrainSample, cfg: &StftConfig) -> Result<Mask> {
    let s = stft(&sample.clean, cfg)?.magnitude();
    let m = ndarray::Zip::from(&s)
        .and(&sample.x)
        .map_collect(|s, x| if *x > 0.0 { (s / x).clamp(0.0, 1.0) } else { 0.0 });
    Mask::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::{simulate, synthetic_noise_pool, synthetic_speech, CorpusConfig};
    use crate::nets::ConvSpec;
    use crate::recognizer::{MockRecognizer, MockRecognizerConfig};
    use std::path::Path;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            stft: StftConfig::default(),
            se: SeModelConfig {
                blstm_layers: 1,
                blstm_hidden: 4,
                fc1_units: 6,
                ..SeModelConfig::desk()
            },
            estimator: CerEstimatorConfig {
                conv: vec![ConvSpec::new(2, 3)],
                fc_units: vec![3],
                ..CerEstimatorConfig::desk()
            },
        }
    }

    fn samples(count: usize, seed: u64) -> Vec<TrainSample> {
        let mock = MockRecognizerConfig::default();
        let speech = synthetic_speech(&mock, count, 3..=5, seed).unwrap();
        let noise = synthetic_noise_pool(3, 2.0, 16_000, seed + 100).unwrap();
        let cfg = CorpusConfig {
            snr_mean_db: 6.0,
            seed,
            ..CorpusConfig::default()
        };
        simulate(&speech, &noise, &cfg)
            .unwrap()
            .into_iter()
            .map(|p| TrainSample::prepare(p.id, p.noisy, p.clean, p.transcript, &StftConfig::default()).unwrap())
            .collect()
    }

    fn scorer() -> Arc<QScorer> {
        Arc::new(QScorer::new(Arc::new(
            MockRecognizer::new(MockRecognizerConfig::default()).unwrap(),
        )))
    }

    fn trainer(seed: u64) -> Trainer {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr_cer: 1e-3,
            lr_se: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        Trainer::new(cfg, tiny_model(), AugmentConfig::default(), scorer()).unwrap()
    }

    /// An estimator without spectral norm whose output is `c` for any input.
    fn constant_estimator(c: f64) -> CerEstimator {
        let cfg = CerEstimatorConfig {
            spectral_norm: false,
            ..tiny_model().estimator
        };
        let mut est = CerEstimator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let last = est.config().fc_units.len();
        let specs: Vec<_> = est.params().specs().to_vec();
        for spec in specs {
            let fill = match spec.name.as_str() {
                n if n == format!("fc.{last}.weight") => Some(0.0),
                n if n == format!("fc.{last}.bias") => Some(c),
                _ => None,
            };
            if let Some(v) = fill {
                est.params_mut().values_mut()[spec.range()].fill(v);
            }
        }
        est
    }

    #[test]
    fn estimator_loss_of_constant_output() {
        let data = samples(1, 3);
        let est = constant_estimator(0.5);
        let s = &data[0];
        let term = |target| EstimatorTerm {
            input: s.x_std.clone(),
            target,
        };
        let batch = [SampleTerms {
            sample: 0,
            terms: vec![term(0.2), term(0.0), term(0.4)],
        }];
        let loss = cer_estimator_loss(&est, &data, &batch).unwrap();
        assert!((loss - 0.35).abs() < 1e-12, "{loss}");

        let perfect = [SampleTerms {
            sample: 0,
            terms: vec![term(0.5), term(0.5)],
        }];
        assert_eq!(cer_estimator_loss(&est, &data, &perfect).unwrap(), 0.0);

        let (l, _) = cer_estimator_loss_grad(&est, &est.weights(), &data, &batch).unwrap();
        assert!((l - loss).abs() < 1e-12);
    }

    #[test]
    fn clean_term_contributes_square_of_output() {
        let data = samples(1, 4);
        let est = constant_estimator(0.3);
        let batch = [SampleTerms {
            sample: 0,
            terms: vec![EstimatorTerm {
                input: data[0].s_std.clone(),
                target: 0.0,
            }],
        }];
        assert!((cer_estimator_loss(&est, &data, &batch).unwrap() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn se_loss_is_mean_squared_estimate() {
        let data = samples(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let se = SeModel::new(tiny_model().se, &mut rng).unwrap();
        assert_eq!(se_loss(&se, &constant_estimator(0.0), &data, &[0, 1]).unwrap(), 0.0);
        let c = constant_estimator(0.3);
        assert!((se_loss(&se, &c, &data, &[0, 1]).unwrap() - 0.09).abs() < 1e-12);

        let est = CerEstimator::new(tiny_model().estimator, &mut rng).unwrap();
        let expected: f64 = data
            .iter()
            .map(|s| {
                let m = se.forward(&s.x_bar).unwrap();
                est.predict(&(&s.x_std * m.values()), &s.s_std).unwrap().powi(2)
            })
            .sum::<f64>()
            / 2.0;
        let got = se_loss(&se, &est, &data, &[0, 1]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        let (lg, grads) = se_loss_grad(&se, &est, &est.weights(), &data, &[0, 1]).unwrap();
        assert!((lg - expected).abs() < 1e-12);
        assert_eq!(grads.len(), se.params().len());
    }

    #[test]
    fn se_loss_depends_on_frozen_estimator() {
        let data = samples(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let se = SeModel::new(tiny_model().se, &mut rng).unwrap();
        let mut est = CerEstimator::new(tiny_model().estimator, &mut rng).unwrap();
        let before = se_loss(&se, &est, &data, &[0, 1]).unwrap();
        let snapshot = est.params().clone();
        est.params_mut().values_mut()[0] += 0.5;
        assert_ne!(se_loss(&se, &est, &data, &[0, 1]).unwrap(), before);
        est.params_mut().copy_from(&snapshot);
        se_loss_grad(&se, &est, &est.weights(), &data, &[0, 1]).unwrap();
        assert_eq!(est.params(), &snapshot);
    }

    #[test]
    fn phases_leave_the_other_model_untouched() {
        let data = samples(8, 7);
        let mut t = trainer(1);
        let terms = t.build_terms(&data, &vec![9; 16]).unwrap();
        let calls = t.scorer().invocations();
        let se_before = t.se().params().clone();
        let est_before = t.estimator().params().clone();
        t.estimator_step(&data, &terms[..4]).unwrap();
        assert_eq!(t.se().params(), &se_before);
        assert_ne!(t.estimator().params(), &est_before);
        let est_mid = t.estimator().params().clone();
        t.se_step(&data, &[0, 1, 2, 3]).unwrap();
        assert_eq!(t.estimator().params(), &est_mid);
        assert_ne!(t.se().params(), &se_before);
        assert_eq!(t.scorer().invocations(), calls);
    }

    #[test]
    fn terms_follow_documented_order() {
        let data = samples(2, 8);
        let t = trainer(2);
        let terms = t.build_terms(&data, &[1, 2, 3, 4]).unwrap();
        assert_eq!(terms.len(), 2);
        for (i, st) in terms.iter().enumerate() {
            assert_eq!(st.sample, i);
            assert_eq!(st.terms.len(), 5);
            assert_eq!(st.terms[SampleTerms::NOISY].input, data[i].x_std);
            assert_eq!(st.terms[SampleTerms::CLEAN].input, data[i].s_std);
            assert_eq!(st.terms[SampleTerms::CLEAN].target, 0.0);
            let q = t.scorer().score(&data[i].noisy, &data[i].transcript).unwrap();
            assert_eq!(st.terms[SampleTerms::NOISY].target, q.value);
        }
    }

    #[test]
    fn two_epochs_are_deterministic() {
        let data = samples(16, 9);
        let run = || {
            let mut t = trainer(5);
            let reports = t.fit(&data, &data[..4], |_, _| Ok(())).unwrap();
            (reports, t.se().params().clone(), t.estimator().params().clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn resume_reproduces_next_epoch() {
        let data = samples(8, 10);
        let mut straight = trainer(6);
        straight.train_epoch(&data, &[]).unwrap();
        let snap = ParameterSnapshot::from_bytes(&straight.snapshot().to_bytes(), Path::new("mem")).unwrap();
        let expected = straight.train_epoch(&data, &[]).unwrap();

        let mut resumed = trainer(6);
        resumed.restore(&snap).unwrap();
        assert_eq!(resumed.epoch(), 1);
        assert_eq!(resumed.train_epoch(&data, &[]).unwrap(), expected);
        assert_eq!(resumed.se().params(), straight.se().params());
        assert_eq!(resumed.estimator().params(), straight.estimator().params());
    }

    #[test]
    fn restore_rejects_other_model() {
        let mut other_model = tiny_model();
        other_model.se.fc1_units = 7;
        let snap = trainer(0).snapshot();
        let mut other = Trainer::new(TrainConfig::default(), other_model, AugmentConfig::default(), scorer()).unwrap();
        assert!(matches!(other.restore(&snap), Err(Error::ConfigHashMismatch { .. })));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = samples(4, 11);
        let cfg = TrainConfig {
            lr_cer: 1e308,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg, tiny_model(), AugmentConfig::default(), scorer()).unwrap();
        let err = t.train_epoch(&data, &[]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn identity_mask_scores_like_noisy() {
        let data = samples(6, 12);
        let sc = scorer();
        let masks: Vec<Mask> = data.iter().map(|s| Mask::ones(s.x.nrows(), s.x.ncols())).collect();
        let report = evaluate_masks(&data, &masks, &sc, &StftConfig::default(), &[]).unwrap();
        assert_eq!(report.rows.len(), data.len());
        for r in &report.rows {
            assert_eq!(r.cer_noisy, r.cer_enhanced, "{}", r.id);
        }
        assert_eq!(report.pooled_cer_noisy, report.pooled_cer_enhanced);
    }

    #[test]
    fn oracle_mask_raises_seg_snr() {
        let data = samples(6, 13);
        let cfg = StftConfig::default();
        let masks: Vec<Mask> = data.iter().map(|s| oracle_mask(s, &cfg).unwrap()).collect();
        let report = evaluate_masks(&data, &masks, &scorer(), &cfg, &[]).unwrap();
        assert!(
            report.mean_seg_snr_enhanced > report.mean_seg_snr_noisy,
            "{} vs {}",
            report.mean_seg_snr_enhanced,
            report.mean_seg_snr_noisy
        );
    }

    #[test]
    fn enhance_keeps_length_and_range() {
        let data = samples(1, 14);
        let se = SeModel::new(tiny_model().se, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = enhance(&se, &data[0].noisy, &StftConfig::default()).unwrap();
        assert!(out.len().abs_diff(data[0].noisy.len()) <= 256);
        assert!(out.samples().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn epoch_report_serializes() {
        let r = EpochReport {
            epoch: 1,
            loss_cer: 0.5,
            loss_se: 0.25,
            estimator_steps: 2,
            se_steps: 2,
            recognizer_calls: 1,
            val_estimator_mae: None,
            val_cer_noisy: Some(0.1),
            val_cer_enhanced: None,
        };
        assert_eq!(r.to_csv_row(), "1,0.5,0.25,,0.1,");
        assert_eq!(CURVE_CSV_HEADER.split(',').count(), r.to_csv_row().split(',').count());
        let back: EpochReport = serde_json::from_str(&r.to_json_line().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
