use std::path::Path;

use plotters::prelude::*;

use crate::fail::CliError;

/// Cap and fitted level over date index for one ticker.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSeries {
    pub ticker: String,
    /// `(date index, cap, level)`.
    pub points: Vec<(f64, f64, f64)>,
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-12);
    (lo - pad, hi + pad)
}

/// One panel per ticker: cap in black, fitted level in red.
pub fn level_plot(path: &Path, series: &[LevelSeries]) -> Result<(), CliError> {
    let rows = series.len().max(1) as u32;
    let root = SVGBackend::new(path, (800, 240 * rows)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| CliError::io(path, e);
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let panels = root.split_evenly((rows as usize, 1));
    for (s, area) in series.iter().zip(panels.iter()) {
        let (x0, x1) = range(s.points.iter().map(|p| p.0));
        let (y0, y1) = range(s.points.iter().flat_map(|p| [p.1, p.2]));
        let mut chart = ChartBuilder::on(area)
            .caption(&s.ticker, ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(24)
            .y_label_area_size(64)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| err(&e))?;
        chart.configure_mesh().disable_mesh().draw().map_err(|e| err(&e))?;
        let finite = |v: &f64| v.is_finite();
        chart
            .draw_series(LineSeries::new(
                s.points.iter().filter(|p| finite(&p.1)).map(|p| (p.0, p.1)),
                &BLACK,
            ))
            .map_err(|e| err(&e))?;
        chart
            .draw_series(LineSeries::new(
                s.points.iter().filter(|p| finite(&p.2)).map(|p| (p.0, p.2)),
                &RED,
            ))
            .map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
