//! Learning-curve figures: cross-instance mean as a line, ±std as a band,
//! both smoothed with a uniform trailing moving average.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{EvalRecord, EvalTable};
use super::HarnessError;

pub const DEFAULT_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PlotStyle {
    /// Moving-average window in evaluation points; 1 plots the raw curve.
    pub window: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for PlotStyle {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            width: 960,
            height: 600,
        }
    }
}

/// One algorithm's records.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub records: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub label: String,
    pub instances: usize,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Written next to each figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotMeta {
    pub title: String,
    pub smoothing_window: usize,
    pub curves: Vec<CurveMeta>,
}

/// Uniform trailing moving average; the first points average what is
/// available.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn curves(series: &[Series], window: usize) -> Result<Vec<CurveMeta>, HarnessError> {
    series
        .iter()
        .filter(|s| !s.records.is_empty())
        .map(|s| {
            let table = EvalTable::from_records(&s.records)?;
            Ok(CurveMeta {
                label: s.label.clone(),
                instances: table.instances.len(),
                mean: smooth(&table.mean_curve(), window),
                std: smooth(&table.std_curve(), window),
                steps: table.steps,
            })
        })
        .collect()
}

/// Draws one figure at `path` (SVG) plus `path` with a `.json` extension
/// holding the plotted numbers and the window. Returns `None` and writes
/// nothing when there is no data.
pub fn emit_plot(title: &str, series: &[Series], style: &PlotStyle, path: &Path) -> Result<Option<PathBuf>, HarnessError> {
    let curves = curves(series, style.window)?;
    if curves.is_empty() {
        return Ok(None);
    }
    let caption = format!("{title} (moving average over {} evaluations)", style.window.max(1));
    draw(&caption, &curves, style, path).map_err(|e| HarnessError::Plot(e.to_string()))?;
    let meta = PlotMeta {
        title: caption,
        smoothing_window: style.window.max(1),
        curves,
    };
    let meta_path = path.with_extension("json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| HarnessError::io(&meta_path, e))?;
    Ok(Some(path.to_path_buf()))
}

fn draw(caption: &str, curves: &[CurveMeta], style: &PlotStyle, path: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let x_max = curves.iter().flat_map(|c| c.steps.iter().copied()).max().unwrap_or(0).max(1) as f64;
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in curves {
        for (m, s) in c.mean.iter().zip(&c.std) {
            y_min = y_min.min(m - s);
            y_max = y_max.max(m + s);
        }
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-6);

    let root = SVGBackend::new(path, (style.width, style.height)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))?;
    chart
        .configure_mesh()
        .x_desc("environment steps")
        .y_desc("average return")
        .draw()?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let upper = c.steps.iter().zip(c.mean.iter().zip(&c.std)).map(|(x, (m, s))| (*x as f64, m + s));
        let lower = c.steps.iter().zip(c.mean.iter().zip(&c.std)).map(|(x, (m, s))| (*x as f64, m - s));
        let band: Vec<(f64, f64)> = upper.chain(lower.rev()).collect();
        chart.draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))?;
        chart
            .draw_series(LineSeries::new(
                c.steps.iter().zip(&c.mean).map(|(x, m)| (*x as f64, *m)),
                color.stroke_width(2),
            ))?
            .label(format!("{} ({} instances)", c.label, c.instances))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()?;
    root.present()?;
    Ok(())
}
