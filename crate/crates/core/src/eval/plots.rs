//! SVG figures for evaluation reports.

use std::path::Path;

use plotters::prelude::*;

use super::{BinningRule, CorrMatrix, TrendEnvelope};
use crate::data::WideMatrix;
use crate::error::{Error, Result};
use crate::schema::CohortSchema;

const SIZE: (u32, u32) = (800, 600);
const REAL: RGBColor = RGBColor(31, 119, 180);
const SYNTH: RGBColor = RGBColor(214, 39, 40);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Overlaid real and synthetic histograms on shared bins.
pub fn density_overlay(path: &Path, title: &str, real: &[f64], synth: &[f64], rule: &BinningRule) -> Result<()> {
    let hr = rule.histogram(real);
    let hs = rule.histogram(synth);
    let (x0, x1) = if rule.levels.is_some() || rule.degenerate {
        (0.0, rule.n_bins as f64)
    } else {
        (rule.edges[0], rule.edges[rule.n_bins])
    };
    let width = (x1 - x0) / rule.n_bins as f64;
    let ymax = hr.iter().chain(&hs).copied().fold(0.0, f64::max).max(1e-9) * 1.1;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0.0..ymax)
        .map_err(plot_err)?;
    chart.configure_mesh().y_desc("proportion").draw().map_err(plot_err)?;
    for (hist, color, label) in [(&hr, REAL, "real"), (&hs, SYNTH, "synthetic")] {
        chart
            .draw_series(hist.iter().enumerate().map(|(k, &h)| {
                let a = x0 + k as f64 * width;
                Rectangle::new([(a, 0.0), (a + width, h)], color.mix(0.35).filled())
            }))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn diverging(r: f64) -> RGBColor {
    let t = r.clamp(-1.0, 1.0);
    let (base, end) = if t >= 0.0 { ((255.0, 255.0, 255.0), (178.0, 24.0, 43.0)) } else { ((255.0, 255.0, 255.0), (33.0, 102.0, 172.0)) };
    let a = t.abs();
    let mix = |b: f64, e: f64| (b + a * (e - b)).round() as u8;
    RGBColor(mix(base.0, end.0), mix(base.1, end.1), mix(base.2, end.2))
}

/// Correlation matrix as a colored grid (blue negative, red positive).
pub fn corr_heatmap(path: &Path, title: &str, corr: &CorrMatrix) -> Result<()> {
    let d = corr.dim();
    let root = SVGBackend::new(path, (800, 800)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(10)
        .build_cartesian_2d(0..d, 0..d)
        .map_err(plot_err)?;
    chart
        .draw_series((0..d).flat_map(|i| {
            (0..d).map(move |j| (i, j)).map(|(i, j)| {
                Rectangle::new([(j, d - 1 - i), (j + 1, d - i)], diverging(corr.get(i, j)).filled())
            })
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Per-participant trajectory of a binary or categorical variable: one row
/// per participant, one column per visit, gray for unobserved cells.
pub fn trajectory_raster(path: &Path, title: &str, wide: &WideMatrix, schema: &CohortSchema, var: &str) -> Result<()> {
    let j = schema
        .long_index(var)
        .ok_or_else(|| Error::Config(format!("unknown variable `{var}`")))?;
    let (n, v) = (wide.n_rows, schema.n_visits);
    let palette = [RGBColor(253, 231, 37), RGBColor(68, 1, 84), RGBColor(33, 145, 140), RGBColor(59, 82, 139)];
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(10)
        .x_label_area_size(40)
        .build_cartesian_2d(0..v, 0..n.max(1))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("visit").disable_y_mesh().draw().map_err(plot_err)?;
    chart
        .draw_series((0..n).flat_map(|i| {
            (0..v).map(move |t| {
                let color = match wide.get(i, schema.wide_col(t, j)) {
                    Some(x) => palette[(x.max(0.0) as usize).min(palette.len() - 1)],
                    None => RGBColor(220, 220, 220),
                };
                Rectangle::new([(t, n - 1 - i), (t + 1, n - i)], color.filled())
            })
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Histogram of dependency errors.
pub fn error_histogram(path: &Path, title: &str, errors: &[f64]) -> Result<()> {
    let (lo, hi) = range_of(errors.iter().copied());
    let bins = 40usize;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &e in errors.iter().filter(|e| e.is_finite()) {
        counts[(((e - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let ymax = counts.iter().copied().max().unwrap_or(0).max(1) as f64 * 1.1;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(lo..hi, 0.0..ymax)
        .map_err(plot_err)?;
    chart.configure_mesh().y_desc("count").draw().map_err(plot_err)?;
    chart
        .draw_series(counts.iter().enumerate().map(|(k, &c)| {
            let a = lo + k as f64 * width;
            Rectangle::new([(a, 0.0), (a + width, c as f64)], SYNTH.mix(0.6).filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Real-data trend, synthetic band and mean, and an optional reference curve.
pub fn trend_plot(
    path: &Path,
    title: &str,
    real_curve: &[f64],
    envelope: &TrendEnvelope,
    reference: Option<&[f64]>,
) -> Result<()> {
    let grid = &envelope.grid;
    let (x0, x1) = range_of(grid.iter().copied());
    let all = real_curve
        .iter()
        .chain(&envelope.lower)
        .chain(&envelope.upper)
        .chain(reference.unwrap_or(&[]))
        .copied();
    let (y0, y1) = range_of(all);
    let pad = 0.05 * (y1 - y0);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().draw().map_err(plot_err)?;
    let band: Vec<(f64, f64)> = grid
        .iter()
        .zip(&envelope.upper)
        .map(|(&x, &y)| (x, y))
        .chain(grid.iter().zip(&envelope.lower).rev().map(|(&x, &y)| (x, y)))
        .collect();
    chart
        .draw_series(std::iter::once(Polygon::new(band, SYNTH.mix(0.2).filled())))
        .map_err(plot_err)?;
    let line = |ys: &[f64]| grid.iter().copied().zip(ys.iter().copied()).collect::<Vec<_>>();
    chart
        .draw_series(LineSeries::new(line(&envelope.mean), SYNTH.stroke_width(2)))
        .map_err(plot_err)?
        .label("synthetic mean")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 15, y)], SYNTH));
    chart
        .draw_series(LineSeries::new(line(real_curve), REAL.stroke_width(2)))
        .map_err(plot_err)?
        .label("real")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 15, y)], REAL));
    if let Some(r) = reference {
        chart
            .draw_series(LineSeries::new(line(r), BLACK.stroke_width(1)))
            .map_err(plot_err)?
            .label("reference")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 15, y)], BLACK));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
