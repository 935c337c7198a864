//! Raster plots. They carry no text so that no font is needed; what each
//! line or bar shows is fixed by the file name and the matching CSVs.

use std::path::Path;

use plotters::prelude::*;

use super::{histogram, HISTOGRAM_BINS};
use crate::error::{Error, Result};
use crate::pipeline::RunRecord;

const SIZE: (u32, u32) = (800, 500);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Integrity(format!("plot: {e}"))
}

/// One `(step, value)` series per layer, layers in first-seen order.
pub(super) fn layer_series(r: &RunRecord, stage: &str, metric: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for p in r.points.iter().filter(|p| p.stage == stage && p.metric == metric) {
        match out.iter_mut().find(|(l, _)| *l == p.layer) {
            Some((_, v)) => v.push((p.step as f64, p.value)),
            None => out.push((p.layer.clone(), vec![(p.step as f64, p.value)])),
        }
    }
    out
}

pub(super) fn l1_by_layer(r: &RunRecord, stage: &str) -> Vec<(String, Vec<f64>)> {
    layer_series(r, stage, "filter_l1").into_iter().map(|(l, v)| (l, v.into_iter().map(|p| p.1).collect())).collect()
}

/// Test accuracy of every stage laid end to end.
pub(super) fn accuracy_curve(r: &RunRecord) -> Vec<(f64, f64)> {
    r.points.iter().filter(|p| p.metric == "test_accuracy").enumerate().map(|(i, p)| (i as f64, p.value)).collect()
}

fn bounds(series: &[(String, Vec<(f64, f64)>)]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|(_, v)| v.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b - a > 0.0 { (a, b) } else { (a - 0.5, b + 0.5) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0.min(0.0), y1);
    (x0, x1, y0, y1 * 1.05)
}

pub(super) fn lines(path: &Path, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (x0, x1, y0, y1) = bounds(series);
    let mut chart = ChartBuilder::on(&root).margin(20).build_cartesian_2d(x0..x1, y0..y1).map_err(plot_err)?;
    chart.configure_mesh().x_labels(0).y_labels(0).draw().map_err(plot_err)?;
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).stroke_width(2);
        chart.draw_series(LineSeries::new(pts.iter().copied(), color)).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// One histogram panel per layer, stacked vertically.
pub(super) fn histograms(path: &Path, layers: &[(String, Vec<f64>)]) -> Result<()> {
    let height = (160 * layers.len().max(1)) as u32;
    let root = BitMapBackend::new(path, (SIZE.0, height)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (i, (panel, (_, values))) in root.split_evenly((layers.len().max(1), 1)).iter().zip(layers).enumerate() {
        let (_, counts) = histogram(values, HISTOGRAM_BINS);
        let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let mut chart = ChartBuilder::on(panel)
            .margin(10)
            .build_cartesian_2d(0.0..HISTOGRAM_BINS as f64, 0.0..top * 1.05)
            .map_err(plot_err)?;
        chart.configure_mesh().x_labels(0).y_labels(0).draw().map_err(plot_err)?;
        let color = Palette99::pick(i).filled();
        chart
            .draw_series(counts.iter().enumerate().map(|(b, &c)| {
                let b = b as f64;
                Rectangle::new([(b + 0.05, 0.0), (b + 0.95, c as f64)], color)
            }))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
