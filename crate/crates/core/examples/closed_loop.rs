//! Closed-loop run on synthetic mock speech: trains the SE model against the
//! mock recognizer and reports noisy vs enhanced CER on held-out pairs.
//!
//! Usage: `closed_loop [seed] [epochs] [lr]`

use std::sync::Arc;
use std::time::Instant;

use cerse_core::augment::AugmentConfig;
use cerse_core::datasim::{simulate, synthetic_noise_pool, synthetic_speech, CorpusConfig};
use cerse_core::recognizer::{MockRecognizer, MockRecognizerConfig, QScorer};
use cerse_core::trainer::{evaluate, ModelConfig, TrainConfig, TrainSample, Trainer};

fn main() -> cerse_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let spread: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8.0);

    let mock = MockRecognizerConfig::default();
    let mut model = ModelConfig::desk();
    if let Ok(f) = std::env::var("FILTERS") {
        let f: usize = f.parse().unwrap();
        model.estimator.conv = vec![cerse_core::nets::ConvSpec::new(f, 3); 4];
    }
    if let Ok(h) = std::env::var("HIDDEN") {
        model.se.blstm_hidden = h.parse().unwrap();
    }
    let stft = model.stft;
    let noises = synthetic_noise_pool(6, 3.0, 16000, 1000 + seed)?;
    let prepare = |count: usize, data_seed: u64| -> cerse_core::Result<Vec<TrainSample>> {
        let speech = synthetic_speech(&mock, count, 4..=8, data_seed)?;
        let cfg = CorpusConfig {
            repetitions: 1,
            snr_mean_db: 6.0,
            snr_spread_db: spread,
            seed: data_seed,
            ..CorpusConfig::default()
        };
        simulate(&speech, &noises, &cfg)?
            .into_iter()
            .map(|p| TrainSample::prepare(p.id, p.noisy, p.clean, p.transcript, &stft))
            .collect()
    };
    let train = prepare(200, 10 * seed + 1)?;
    let test = prepare(50, 10 * seed + 2)?;

    let scorer = Arc::new(QScorer::new(Arc::new(MockRecognizer::new(mock.clone())?)));
    let lr_cer: f64 = std::env::var("LR_CER").ok().and_then(|s| s.parse().ok()).unwrap_or(lr);
    let copies: usize = std::env::var("COPIES").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
    let cer_steps: usize = std::env::var("CER_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let replay: usize = std::env::var("REPLAY").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = TrainConfig {
        epochs,
        lr_cer,
        lr_se: lr,
        augment_copies: copies,
        cer_steps,
        replay_history: replay,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, model, AugmentConfig::default(), scorer.clone())?;
    let start = Instant::now();
    let before = evaluate(trainer.se(), &test, &scorer, &stft, &[])?;
    println!(
        "init: noisy {:.4} enhanced {:.4}",
        before.mean_cer_noisy, before.mean_cer_enhanced
    );
    trainer.fit(&train, &test[..10], |_, r| {
        println!(
            "epoch {:2} Lcer {:.4} Lse {:.4} mae {:.3} val {:.3}->{:.3} t={:.0}s",
            r.epoch,
            r.loss_cer,
            r.loss_se,
            r.val_estimator_mae.unwrap_or(f64::NAN),
            r.val_cer_noisy.unwrap_or(f64::NAN),
            r.val_cer_enhanced.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let after = evaluate(trainer.se(), &test, &scorer, &stft, &[])?;
    let preds = trainer.predictions(&test)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = preds.iter().map(|p| (p.pred_noisy, p.q_noisy)).unzip();
    let (xe, ye): (Vec<f64>, Vec<f64>) = preds.iter().map(|p| (p.pred_enhanced, p.q_enhanced)).unzip();
    let tp = trainer.predictions(&train)?;
    let (xt, yt): (Vec<f64>, Vec<f64>) = tp.iter().map(|p| (p.pred_noisy, p.q_noisy)).unzip();
    println!(
        "pearson enhanced {:.3} train-noisy {:.3}",
        pearson(&xe, &ye),
        pearson(&xt, &yt)
    );
    for p in preds.iter().take(12) {
        println!(
            "  pred {:.3} q {:.3} | pred {:.3} q {:.3}",
            p.pred_noisy, p.q_noisy, p.pred_enhanced, p.q_enhanced
        );
    }
    println!(
        "held-out: noisy {:.4} enhanced {:.4} ratio {:.3} segsnr {:.2}->{:.2} pearson(noisy) {:.3} time {:.0}s",
        after.mean_cer_noisy,
        after.mean_cer_enhanced,
        after.mean_cer_enhanced / after.mean_cer_noisy,
        after.mean_seg_snr_noisy,
        after.mean_seg_snr_enhanced,
        pearson(&xs, &ys),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
