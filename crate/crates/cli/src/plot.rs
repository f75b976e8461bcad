//! SVG charts.

use std::path::Path;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;

use jointseg::ablate::Table;
use jointseg::train::RunRecord;

fn draw_err<E: std::error::Error + Send + Sync + 'static>(e: DrawingAreaErrorKind<E>) -> anyhow::Error {
    anyhow!("drawing: {e}")
}

/// Total training loss against iteration, one line per run.
pub fn loss_curves(runs: &[(String, RunRecord)], path: &Path) -> Result<()> {
    let series: Vec<(&str, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|(name, r)| (name.as_str(), r.losses().map(|(i, b)| (i as f64, b.total)).collect()))
        .collect();
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x_max, mut y_max) = (1.0f64, f64::MIN);
    let mut y_min = f64::MAX;
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if y_min > y_max {
        bail!("no loss entries in the given records");
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-6);

    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("iteration").y_desc("loss").draw().map_err(draw_err)?;
    for (i, (name, s)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s, color.stroke_width(1)))
            .map_err(draw_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Mean mIoU per cell in grid order, with the per-seed spread as a whisker.
pub fn ablation_bars(table: &Table, path: &Path) -> Result<()> {
    if table.rows.is_empty() {
        bail!("table {} has no rows", table.grid);
    }
    let n = table.rows.len();
    let spread: Vec<(f64, f64)> = table
        .rows
        .iter()
        .map(|r| {
            let v = r.reports.iter().map(|e| e.seg.miou);
            (v.clone().fold(f64::MAX, f64::min), v.fold(f64::MIN, f64::max))
        })
        .collect();
    let lo = spread.iter().map(|s| s.0).fold(f64::MAX, f64::min);
    let y_min = (lo - 5.0).clamp(0.0, 100.0).floor();

    let root = SVGBackend::new(path, (160 + 90 * n as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ({} seeds)", table.grid, table.seeds.len()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(48)
        .y_label_area_size(56)
        .build_cartesian_2d((0..n).into_segmented(), y_min..100.0)
        .map_err(draw_err)?;
    let names: Vec<String> = table.rows.iter().map(|r| r.cell.name.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => names.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .y_desc("mIoU (%)")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(table.rows.iter().enumerate().map(|(i, r)| {
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), y_min), (SegmentValue::Exact(i + 1), r.miou())],
                Palette99::pick(i).filled(),
            );
            bar.set_margin(0, 0, 12, 12);
            bar
        }))
        .map_err(draw_err)?;
    chart
        .draw_series(spread.iter().enumerate().map(|(i, &(a, b))| {
            PathElement::new([(SegmentValue::CenterOf(i), a), (SegmentValue::CenterOf(i), b)], BLACK.stroke_width(2))
        }))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}
