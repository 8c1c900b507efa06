use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use cerse_core::audio::{read_wav, write_wav, SAMPLE_RATE};
use cerse_core::datasim::build_corpus;
use cerse_core::nets::ParameterSnapshot;
use cerse_core::recognizer::{MockRecognizer, QScorer};
use cerse_core::trainer::{self, EpochReport, EvalReport, ModelConfig, TrainSample, Trainer, CURVE_CSV_HEADER};
use cerse_core::{stft, Error as CoreError};
use log::info;

use crate::config::RunConfig;
use crate::data;
use crate::plots;
use crate::GlobalArgs;

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CURVES_CSV: &str = "curves.csv";
pub const CURVES_PNG: &str = "curves.png";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";
pub const SPECTROGRAM_DIR: &str = "spectrograms";

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).with_context(|| format!("writing {}", p.display()))
}

fn write_run_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join("run_config.toml"), toml::to_string(cfg)?)
}

pub fn simulate(cfg: &RunConfig, g: &GlobalArgs) -> Result<()> {
    let (speech, noise) = data::sources(cfg)?;
    create_dir(&g.out)?;
    let manifest = build_corpus(&speech, &noise, &cfg.corpus, &g.out)?;
    write_run_config(cfg, &g.out)?;
    let n = manifest.rows.len();
    let mean_snr = manifest.rows.iter().map(|r| r.snr_db).sum::<f64>() / n as f64;
    println!(
        "simulated {n} pairs from {} utterances and {} noise sources (mean SNR {mean_snr:.2} dB) in {}",
        speech.len(),
        noise.len(),
        g.out.display()
    );
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<EpochReport>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    |source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_curves(out: &Path, reports: &[EpochReport]) -> cerse_core::Result<()> {
    let mut log = String::new();
    let mut csv = format!("{CURVE_CSV_HEADER}\n");
    for r in reports {
        log.push_str(&r.to_json_line()?);
        log.push('\n');
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }
    let (log_path, csv_path) = (out.join(TRAIN_LOG), out.join(CURVES_CSV));
    fs::write(&log_path, log).map_err(io_err(&log_path))?;
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))
}

pub fn train(cfg: &RunConfig, g: &GlobalArgs, corpus: &Path, val_corpus: Option<&Path>) -> Result<()> {
    let model = cfg.model();
    let train = data::load_corpus(corpus, &model.stft)?;
    let val = match val_corpus {
        Some(d) => data::load_corpus(d, &model.stft)?,
        None => Vec::new(),
    };
    let out = g.out.as_path();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    write_run_config(cfg, out)?;

    let scorer = Arc::new(QScorer::with_cache_file(cfg.recognizer()?, out.join("q_cache.tsv"))?);
    let mut trainer = Trainer::new(cfg.train.clone(), model.clone(), cfg.augment, scorer)?;
    let mut reports = Vec::new();
    if let Some(path) = &g.resume {
        let snap = ParameterSnapshot::load(path, Some(&model.hash()))?;
        trainer.restore(&snap)?;
        reports = read_log(&out.join(TRAIN_LOG))?;
        reports.retain(|r| r.epoch <= trainer.epoch());
        info!("resumed from {} after epoch {}", path.display(), trainer.epoch());
    }
    write_curves(out, &reports)?;
    info!("training on {} utterances ({} for validation)", train.len(), val.len());

    let result = trainer.fit(&train, &val, |t, r| {
        let snap = t.snapshot();
        snap.save(ckpt_dir.join(format!("epoch_{:03}.ckpt", r.epoch)))?;
        snap.save(out.join(LATEST_CHECKPOINT))?;
        reports.push(r.clone());
        write_curves(out, &reports)?;
        info!(
            "epoch {} loss_cer {:.4} loss_se {:.4} recognizer calls {}",
            r.epoch, r.loss_cer, r.loss_se, r.recognizer_calls
        );
        Ok(())
    });
    if let Err(e) = result {
        if matches!(e, CoreError::NonFiniteLoss { .. }) {
            let path = out.join(ABORT_CHECKPOINT);
            trainer.snapshot().save(&path)?;
            return Err(anyhow!(e).context(format!("training aborted, state saved to {}", path.display())));
        }
        return Err(e.into());
    }
    if !reports.is_empty() {
        plots::training_curves(&out.join(CURVES_PNG), &reports)?;
    }
    println!(
        "trained {} epochs; checkpoints in {}",
        trainer.epoch(),
        ckpt_dir.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(ParameterSnapshot, ModelConfig)> {
    let snap = ParameterSnapshot::load(path, None)?;
    let model = snap
        .meta
        .get("model")
        .cloned()
        .ok_or_else(|| anyhow!("checkpoint {} has no model configuration", path.display()))?;
    let model: ModelConfig = serde_json::from_value(model)?;
    Ok((snap, model))
}

pub fn enhance(g: &GlobalArgs, checkpoint: &Path, inputs: &[PathBuf]) -> Result<()> {
    let (snap, model) = load_checkpoint(checkpoint)?;
    let se = trainer::load_se_model(&snap, &model)?;
    let mut seen = HashSet::new();
    for p in inputs {
        if !seen.insert(data::stem(p)) {
            bail!("two inputs share the file name {}", data::stem(p));
        }
    }
    create_dir(&g.out)?;
    for input in inputs {
        let noisy = read_wav(input, SAMPLE_RATE)?;
        let enhanced = trainer::enhance(&se, &noisy, &model.stft)?;
        let name = data::stem(input);
        write_wav(g.out.join(format!("{name}.wav")), &enhanced)?;
        if g.dump_spectrograms {
            let dir = g.out.join(SPECTROGRAM_DIR);
            create_dir(&dir)?;
            let n = stft(&noisy, &model.stft)?.magnitude();
            let e = stft(&enhanced, &model.stft)?.magnitude();
            plots::spectrograms(&dir.join(format!("{name}.png")), &[&n, &e])?;
        }
    }
    println!("enhanced {} files into {}", inputs.len(), g.out.display());
    Ok(())
}

fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    writeln!(f, "id,cer_noisy,cer_enhanced,seg_snr_noisy,seg_snr_enhanced")?;
    for r in &report.rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.id, r.cer_noisy, r.cer_enhanced, r.seg_snr_noisy, r.seg_snr_enhanced
        )?;
    }
    Ok(())
}

fn dump_eval_spectrograms(dir: &Path, samples: &[TrainSample], se: &cerse_core::nets::SeModel) -> Result<()> {
    create_dir(dir)?;
    for s in samples {
        let mask = se.forward(&s.x_bar)?;
        let enhanced = &s.x * mask.values();
        let clean = stft(&s.clean, s.noisy_spec.config())?.magnitude();
        plots::spectrograms(&dir.join(format!("{}.png", s.id)), &[&s.x, &enhanced, &clean])?;
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, g: &GlobalArgs, checkpoint: &Path, corpus: &Path) -> Result<()> {
    let (snap, model) = load_checkpoint(checkpoint)?;
    let se = trainer::load_se_model(&snap, &model)?;
    let samples = data::load_corpus(corpus, &model.stft)?;
    let scorer = QScorer::new(cfg.recognizer()?);
    let report = trainer::evaluate(&se, &samples, &scorer, &model.stft, &[])?;

    let out = g.out.as_path();
    create_dir(out)?;
    write_file(&out.join("eval.jsonl"), report.to_json_lines()?)?;
    write_eval_csv(&out.join("eval.csv"), &report)?;
    let noisy: Vec<f64> = report.rows.iter().map(|r| r.cer_noisy).collect();
    let enhanced: Vec<f64> = report.rows.iter().map(|r| r.cer_enhanced).collect();
    plots::cer_histogram(&out.join("cer_hist.png"), &noisy, &enhanced)?;
    plots::seg_snr_scatter(&out.join("segsnr_scatter.png"), &report.rows)?;
    let ckpt_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let log = [ckpt_dir.join(TRAIN_LOG), ckpt_dir.join("..").join(TRAIN_LOG)]
        .into_iter()
        .find(|p| p.exists());
    if let Some(log) = log {
        let reports = read_log(&log)?;
        if !reports.is_empty() {
            plots::training_curves(&out.join(CURVES_PNG), &reports)?;
        }
    }
    if g.dump_spectrograms {
        dump_eval_spectrograms(&out.join(SPECTROGRAM_DIR), &samples, &se)?;
    }
    println!(
        "{} utterances: mean CER noisy {:.4} enhanced {:.4}; mean SegSNR noisy {:.2} dB enhanced {:.2} dB",
        report.rows.len(),
        report.mean_cer_noisy,
        report.mean_cer_enhanced,
        report.mean_seg_snr_noisy,
        report.mean_seg_snr_enhanced
    );
    Ok(())
}

pub fn recognize(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let rec = MockRecognizer::new(cfg.mock.clone())?;
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut lines = String::new();
    for p in &paths {
        let text = rec.recognize_one(&read_wav(p, cfg.mock.sample_rate)?)?;
        lines.push_str(&format!("{}\t{}\n", data::stem(p), text));
    }
    write_file(output, lines)
}
