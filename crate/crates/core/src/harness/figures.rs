//! PNG figures, each written next to a tab-separated table of its data.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{LandscapeGrid, SweepPoint};
use crate::trainer::RunHistory;

/// Environment variable naming a TrueType font for figure text.
pub const FONT_ENV: &str = "PGK_FONT";

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Register a font once; figures are drawn without text when none is found.
fn text_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var_os(FONT_ENV).map(PathBuf::from);
        let found = env
            .into_iter()
            .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
            .find_map(|p| std::fs::read(p).ok());
        match found {
            Some(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            None => false,
        }
    })
}

fn fig_err(e: impl std::fmt::Display) -> Error {
    Error::Figure(e.to_string())
}

fn write_table(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// A named series of `(x, y)` points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn draw_lines<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[Series],
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let y1 = pts().map(|p| p.1).fold(0.0f64, f64::max).max(1e-3) * 1.05;
    let text = text_available();
    let mut builder = ChartBuilder::on(area);
    builder.margin(12);
    if text {
        builder
            .caption(title, ("sans-serif", 20))
            .x_label_area_size(36)
            .y_label_area_size(48);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, 0.0..y1).map_err(fig_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(x_desc).y_desc(y_desc);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(fig_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let drawn = chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(fig_err)?;
        if text {
            drawn
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(fig_err)?;
    }
    Ok(())
}

/// Column table: first column `x_name`, then one column per series (blank where missing).
fn series_table(x_name: &str, series: &[Series]) -> String {
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    let mut out = String::from(x_name);
    for s in series {
        out.push('\t');
        out.push_str(&s.label);
    }
    out.push('\n');
    for x in xs {
        out.push_str(&format!("{x}"));
        for s in series {
            out.push('\t');
            if let Some(p) = s.points.iter().find(|p| p.0 == x) {
                out.push_str(&format!("{}", p.1));
            }
        }
        out.push('\n');
    }
    out
}

/// Robust accuracy (left) and attack success rate (right) against epoch.
pub fn overfitting_series(history: &RunHistory) -> (Vec<Series>, Vec<Series>) {
    let mut robust = Vec::new();
    let mut asr = Vec::new();
    let attacks: std::collections::BTreeSet<&String> =
        history.records.iter().flat_map(|r| r.eval.robust_acc.keys()).collect();
    for a in attacks {
        let pick = |f: &dyn Fn(&crate::trainer::EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
            history.records.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
        };
        robust.push(Series {
            label: format!("robust_{a}"),
            points: pick(&|r| r.eval.robust_acc.get(a).copied()),
        });
        let ema = pick(&|r| r.eval.robust_acc_ema.get(a).copied());
        if !ema.is_empty() {
            robust.push(Series {
                label: format!("robust_ema_{a}"),
                points: ema,
            });
        }
        asr.push(Series {
            label: format!("asr_{a}"),
            points: pick(&|r| r.eval.attack_success_rate.get(a).copied()),
        });
    }
    asr.push(Series {
        label: "asr_train".into(),
        points: history.records.iter().map(|r| (r.epoch as f64, r.attack_success_rate)).collect(),
    });
    (robust, asr)
}

/// Side-by-side robust accuracy and attack success rate per epoch; returns the table path.
pub fn overfitting_figure(history: &RunHistory, png: &Path) -> Result<PathBuf> {
    let (robust, asr) = overfitting_series(history);
    let mut all = robust;
    let split = all.len();
    all.extend(asr);
    let tsv = png.with_extension("tsv");
    write_table(&tsv, &series_table("epoch", &all))?;
    let root = BitMapBackend::new(png, (1200, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(fig_err)?;
    let (left, right) = root.split_horizontally(600);
    draw_lines(&left, "Robust accuracy", "epoch", "accuracy", &all[..split])?;
    draw_lines(&right, "Attack success rate", "epoch", "success rate", &all[split..])?;
    root.present().map_err(fig_err)?;
    Ok(tsv)
}

/// Robust accuracy against ε (in units of 1/255) for each labelled sweep.
pub fn sweep_figure(sweeps: &[(String, Vec<SweepPoint>)], png: &Path) -> Result<PathBuf> {
    let series: Vec<Series> = sweeps
        .iter()
        .map(|(label, pts)| Series {
            label: label.clone(),
            points: pts.iter().map(|p| ((p.epsilon * 255.0 * 1e6).round() / 1e6, p.robust_acc)).collect(),
        })
        .collect();
    let tsv = png.with_extension("tsv");
    write_table(&tsv, &series_table("epsilon_255", &series))?;
    let root = BitMapBackend::new(png, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(fig_err)?;
    draw_lines(&root, "Robust accuracy vs budget", "epsilon x 255", "accuracy", &series)?;
    root.present().map_err(fig_err)?;
    Ok(tsv)
}

/// Heat map of the loss grid.
pub fn landscape_figure(grid: &LandscapeGrid, png: &Path) -> Result<PathBuf> {
    let tsv = png.with_extension("tsv");
    write_table(&tsv, &grid.to_table())?;
    let (lo, hi) = grid
        .losses
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
    let span = (hi - lo).max(1e-12);
    let root = BitMapBackend::new(png, (560, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(fig_err)?;
    let text = text_available();
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12);
    if text {
        builder
            .caption("Loss landscape", ("sans-serif", 20))
            .x_label_area_size(36)
            .y_label_area_size(48);
    }
    let step = 2.0 / (grid.resolution - 1) as f64;
    let h = step / 2.0;
    let mut chart = builder
        .build_cartesian_2d(-1.0 - h..1.0 + h, -1.0 - h..1.0 + h)
        .map_err(fig_err)?;
    let mut mesh = chart.configure_mesh();
    mesh.disable_mesh();
    if text {
        mesh.x_desc("a (adversarial direction)").y_desc("b (random direction)");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(fig_err)?;
    chart
        .draw_series(grid.coords.iter().enumerate().flat_map(|(i, &a)| {
            grid.coords.iter().enumerate().map(move |(j, &b)| {
                let t = (grid.losses[i][j] - lo) / span;
                let color = HSLColor(0.66 * (1.0 - t), 0.85, 0.5);
                Rectangle::new([(a - h, b - h), (a + h, b + h)], color.filled())
            })
        }))
        .map_err(fig_err)?;
    root.present().map_err(fig_err)?;
    Ok(tsv)
}
