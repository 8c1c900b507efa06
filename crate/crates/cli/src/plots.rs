//! Static PNG figures built from report data.
//!
//! Text needs a TrueType font. `CERSE_FONT` names one explicitly; otherwise a
//! few common system locations are tried. Without a font the figures are
//! drawn without captions or tick labels.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use cerse_core::trainer::{EpochReport, EvalRow};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

pub const FONT_ENV: &str = "CERSE_FONT";

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

const SIZE: (u32, u32) = (800, 600);

fn have_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let candidates: Vec<String> = match std::env::var(FONT_ENV) {
            Ok(p) => vec![p],
            Err(_) => FONT_CANDIDATES.iter().map(|s| s.to_string()).collect(),
        };
        candidates.iter().any(|p| match std::fs::read(p) {
            Ok(bytes) => register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice())).is_ok(),
            Err(_) => false,
        })
    })
}

fn plot_err<E: std::fmt::Debug>(path: &Path) -> impl FnOnce(E) -> anyhow::Error + '_ {
    move |e| anyhow!("drawing {}: {e:?}", path.display())
}

macro_rules! chart {
    ($root:expr, $title:expr, $x:expr, $y:expr) => {{
        let mut b = ChartBuilder::on($root);
        b.margin(20);
        if have_font() {
            b.caption($title, ("sans-serif", 24))
                .x_label_area_size(40)
                .y_label_area_size(50);
        }
        b.build_cartesian_2d($x, $y)
    }};
}

macro_rules! mesh {
    ($chart:expr, $xdesc:expr, $ydesc:expr) => {{
        let mut m = $chart.configure_mesh();
        if have_font() {
            m.x_desc($xdesc).y_desc($ydesc);
        } else {
            m.x_labels(0).y_labels(0);
        }
        m.draw()
    }};
}

macro_rules! legend {
    ($chart:expr) => {{
        if have_font() {
            $chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()?;
        }
    }};
}

/// Side-by-side histogram of per-utterance CER over ten bins on [0, 1].
pub fn cer_histogram(path: &Path, noisy: &[f64], enhanced: &[f64]) -> Result<()> {
    const BINS: usize = 10;
    let count = |v: &[f64]| {
        let mut c = [0usize; BINS];
        for &x in v {
            c[((x.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1)] += 1;
        }
        c
    };
    let (cn, ce) = (count(noisy), count(enhanced));
    let top = cn.iter().chain(&ce).copied().max().unwrap_or(0).max(1) as f64 * 1.1;
    let e = plot_err(path);
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    let draw = || -> Result<(), DrawingAreaErrorKind<_>> {
        root.fill(&WHITE)?;
        let mut chart = chart!(&root, "Per-utterance CER", 0f64..1f64, 0f64..top)?;
        mesh!(chart, "CER", "utterances")?;
        let w = 0.5 / BINS as f64;
        for (series, counts, color, shift) in [("noisy", &cn, RED, 0.0), ("enhanced", &ce, BLUE, w)] {
            chart
                .draw_series(counts.iter().enumerate().map(|(i, &c)| {
                    let x0 = i as f64 / BINS as f64 + shift;
                    Rectangle::new([(x0, 0.0), (x0 + w, c as f64)], color.mix(0.7).filled())
                }))?
                .label(series)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        legend!(chart);
        root.present()
    };
    draw().map_err(e)
}

/// Enhanced against noisy SegSNR per utterance, with the identity line.
pub fn seg_snr_scatter(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let vals = rows.iter().flat_map(|r| [r.seg_snr_noisy, r.seg_snr_enhanced]);
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo - 1.0, hi + 1.0) } else { (-10.0, 35.0) };
    let e = plot_err(path);
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    let draw = || -> Result<(), DrawingAreaErrorKind<_>> {
        root.fill(&WHITE)?;
        let mut chart = chart!(&root, "SegSNR (dB)", lo..hi, lo..hi)?;
        mesh!(chart, "noisy", "enhanced")?;
        chart.draw_series(LineSeries::new([(lo, lo), (hi, hi)], BLACK.mix(0.4)))?;
        chart.draw_series(
            rows.iter()
                .map(|r| Circle::new((r.seg_snr_noisy, r.seg_snr_enhanced), 3, BLUE.filled())),
        )?;
        root.present()
    };
    draw().map_err(e)
}

/// Training losses and, where validated, mean CER per epoch.
pub fn training_curves(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let last = reports.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let mut series: Vec<(&str, RGBColor, Vec<(f64, f64)>)> = vec![
        (
            "loss_cer",
            RED,
            reports.iter().map(|r| (r.epoch as f64, r.loss_cer)).collect(),
        ),
        (
            "loss_se",
            BLUE,
            reports.iter().map(|r| (r.epoch as f64, r.loss_se)).collect(),
        ),
    ];
    let opt = |f: fn(&EpochReport) -> Option<f64>| -> Vec<(f64, f64)> {
        reports
            .iter()
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
            .collect()
    };
    for (name, color, f) in [
        (
            "val_cer_noisy",
            MAGENTA,
            (|r| r.val_cer_noisy) as fn(&EpochReport) -> Option<f64>,
        ),
        ("val_cer_enhanced", GREEN, |r| r.val_cer_enhanced),
    ] {
        let pts = opt(f);
        if !pts.is_empty() {
            series.push((name, color, pts));
        }
    }
    let top = series
        .iter()
        .flat_map(|s| s.2.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.1;
    let e = plot_err(path);
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    let draw = || -> Result<(), DrawingAreaErrorKind<_>> {
        root.fill(&WHITE)?;
        let mut chart = chart!(&root, "Training curves", 0f64..last, 0f64..top)?;
        mesh!(chart, "epoch", "value")?;
        for (name, color, pts) in series {
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))?
                .label(name)
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        legend!(chart);
        root.present()
    };
    draw().map_err(e)
}

/// Log-magnitude spectrograms stacked top to bottom, low frequencies at
/// the bottom of each panel. All panels share one colour scale.
pub fn spectrograms(path: &Path, panels: &[&ndarray::Array2<f64>]) -> Result<()> {
    use plotters::style::colors::colormaps::ViridisRGB;
    let Some(first) = panels.first() else {
        return Ok(());
    };
    let (bins, frames) = first.dim();
    let db: Vec<ndarray::Array2<f64>> = panels.iter().map(|p| p.mapv(|v| 20.0 * (v + 1e-8).log10())).collect();
    let hi = db
        .iter()
        .flat_map(|p| p.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = hi - 80.0;
    let e = plot_err(path);
    let sx = (600 / frames.max(1)).max(1);
    let root =
        BitMapBackend::new(path, ((frames * sx).max(1) as u32, (bins * panels.len()) as u32)).into_drawing_area();
    let draw = || -> Result<(), DrawingAreaErrorKind<_>> {
        for (k, p) in db.iter().enumerate() {
            for ((f, t), &v) in p.indexed_iter() {
                let h = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                let y = (k * bins + bins - 1 - f) as i32;
                let color = ViridisRGB::get_color(h as f32);
                for dx in 0..sx {
                    root.draw_pixel(((t * sx + dx) as i32, y), &color)?;
                }
            }
        }
        root.present()
    };
    draw().map_err(e)
}
