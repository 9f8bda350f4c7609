use anyhow::{anyhow, Result};
use duda_core::trainer::MetricsRow;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub run: String,
    pub mode: String,
    pub seed: String,
    pub map50: f64,
}

const SIZE: (u32, u32) = (800, 480);
const COLORS: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let (x0, x1) = span(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = span(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    step: u64,
    #[serde(rename = "L_det")]
    l_det: f64,
    #[serde(rename = "L_sty")]
    l_sty: f64,
    #[serde(rename = "L_wea")]
    l_wea: f64,
    total: f64,
}

pub fn loss_curves(dir: &Path, name: &str, rows: &[MetricsRow]) -> Result<Vec<PathBuf>> {
    let svg = dir.join(format!("loss_{name}.svg"));
    let csv = dir.join(format!("loss_{name}.csv"));
    let pick = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    line_chart(
        &svg,
        &format!("losses: {name}"),
        "loss",
        &[
            ("L_det", pick(|r| r.l_det)),
            ("L_sty", pick(|r| r.l_sty)),
            ("L_wea", pick(|r| r.l_wea)),
            ("total", pick(|r| r.total)),
        ],
    )?;
    let table: Vec<LossRow> = rows
        .iter()
        .map(|r| LossRow {
            step: r.step,
            l_det: r.l_det,
            l_sty: r.l_sty,
            l_wea: r.l_wea,
            total: r.total,
        })
        .collect();
    write_csv(&csv, &table)?;
    Ok(vec![svg, csv])
}

#[derive(Serialize)]
struct CosineRow {
    step: u64,
    pos_cosine: f64,
}

/// Nothing is drawn for runs that never measured the positive cosine.
pub fn cosine_curve(dir: &Path, name: &str, rows: &[MetricsRow]) -> Result<Vec<PathBuf>> {
    let table: Vec<CosineRow> = rows
        .iter()
        .filter_map(|r| {
            r.pos_cosine.map(|c| CosineRow {
                step: r.step,
                pos_cosine: c,
            })
        })
        .collect();
    if table.is_empty() {
        return Ok(Vec::new());
    }
    let svg = dir.join(format!("cosine_{name}.svg"));
    let csv = dir.join(format!("cosine_{name}.csv"));
    let pts = table.iter().map(|r| (r.step as f64, r.pos_cosine)).collect();
    line_chart(
        &svg,
        &format!("positive-pair cosine: {name}"),
        "cosine",
        &[("pos_cosine", pts)],
    )?;
    write_csv(&csv, &table)?;
    Ok(vec![svg, csv])
}

pub fn map_bars(dir: &Path, split: &str, bars: &[Bar]) -> Result<Vec<PathBuf>> {
    let svg = dir.join(format!("map_{split}.svg"));
    let csv = dir.join(format!("map_{split}.csv"));
    let root = SVGBackend::new(&svg, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = bars.len();
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("mAP@0.5 on {split}"), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(60)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..1.0f64)
        .map_err(plot_err)?;
    let labels: Vec<String> = bars
        .iter()
        .map(|b| {
            if b.mode.is_empty() {
                b.run.clone()
            } else {
                format!("{} s{}", b.mode, b.seed)
            }
        })
        .collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) if *i < n => labels[*i].clone(),
            _ => String::new(),
        })
        .y_desc("mAP50")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            let color = COLORS[i % COLORS.len()];
            Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), b.map50)],
                color.filled(),
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    drop(chart);
    drop(root);
    write_csv(&csv, bars)?;
    Ok(vec![svg, csv])
}
