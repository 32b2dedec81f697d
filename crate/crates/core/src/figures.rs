//! PNG charts drawn with plotters.

use std::path::Path;
use std::sync::Once;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::{Error, Result};

static FONT: Once = Once::new();
const FONT_BYTES: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");
const SIZE: (u32, u32) = (800, 520);

fn ensure_font() {
    FONT.call_once(|| {
        if register_font("sans-serif", FontStyle::Normal, FONT_BYTES).is_err() {
            log::warn!("bundled font rejected; figure text may be missing");
        }
    });
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Serialization(format!("{}: {e}", path.display()))
}

fn palette(i: usize) -> RGBColor {
    const C: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
    ];
    C[i % C.len()]
}

fn range(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-6);
    (lo - pad * span, hi + pad * span)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with markers; `reference` adds dashed horizontal lines.
pub fn line_chart(
    path: &Path,
    title: &str,
    axes: (&str, &str),
    series: &[Series],
    reference: &[(String, f64)],
) -> Result<()> {
    ensure_font();
    crate::io::ensure_parent(path)?;
    let err = plot_err(path);
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), 0.05);
    let (y0, y1) = range(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(reference.iter().map(|r| r.1)),
        0.1,
    );
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc(axes.0)
        .y_desc(axes.1)
        .draw()
        .map_err(&err)?;
    for (i, s) in series.iter().enumerate() {
        let color = palette(i);
        chart
            .draw_series(LineSeries::new(s.points.clone(), color.stroke_width(2)))
            .map_err(&err)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(&err)?;
    }
    for (j, (name, y)) in reference.iter().enumerate() {
        let color = palette(series.len() + j);
        let dashes: Vec<f64> = (0..40)
            .map(|t| x0 + (x1 - x0) * t as f64 / 40.0)
            .collect();
        chart
            .draw_series(
                dashes
                    .chunks(2)
                    .filter(|c| c.len() == 2)
                    .map(|c| PathElement::new(vec![(c[0], *y), (c[1], *y)], color.stroke_width(2))),
            )
            .map_err(&err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// Horizontal bars, first label on top.
pub fn bar_chart(path: &Path, title: &str, x_label: &str, bars: &[(String, f64)]) -> Result<()> {
    ensure_font();
    crate::io::ensure_parent(path)?;
    let err = plot_err(path);
    let n = bars.len();
    let xmax = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12) * 1.1;
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(200)
        .build_cartesian_2d(0.0..xmax, 0.0..n as f64)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_y_mesh()
        .x_desc(x_label)
        .y_labels(n.max(1) * 2 + 1)
        .y_label_formatter(&|y| {
            let slot = n as f64 - y - 0.5;
            let i = slot.round();
            if (slot - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                labels[i as usize].clone()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            let top = n as f64 - i as f64 - 0.1;
            Rectangle::new([(0.0, top - 0.8), (b.1, top)], palette(0).filled())
        }))
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// One row of points per column: x is the attribution, y is jittered around
/// the row; red for positive, blue for negative.
pub fn beeswarm(path: &Path, title: &str, rows: &[(String, Vec<f64>)]) -> Result<()> {
    ensure_font();
    crate::io::ensure_parent(path)?;
    let err = plot_err(path);
    let n = rows.len();
    let (x0, x1) = range(rows.iter().flat_map(|r| r.1.iter().copied()), 0.05);
    let labels: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(200)
        .build_cartesian_2d(x0..x1, 0.0..n as f64)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_y_mesh()
        .x_desc("Shapley value")
        .y_labels(n.max(1) * 2 + 1)
        .y_label_formatter(&|y| {
            let slot = n as f64 - y - 0.5;
            let i = slot.round();
            if (slot - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                labels[i as usize].clone()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(&err)?;
    for (i, (_, values)) in rows.iter().enumerate() {
        let centre = n as f64 - i as f64 - 0.5;
        // Deterministic jitter from the golden-ratio sequence.
        let pts = values.iter().enumerate().map(|(j, &v)| {
            let jitter = ((j as f64 * 0.618_033_988_75).fract() - 0.5) * 0.7;
            let color = if v >= 0.0 { RGBColor(214, 39, 40) } else { RGBColor(31, 119, 180) };
            Circle::new((v, centre + jitter), 2, color.mix(0.6).filled())
        });
        chart.draw_series(pts).map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Min, quartiles and max per group as box-and-whisker glyphs.
pub fn box_chart(path: &Path, title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> Result<()> {
    ensure_font();
    crate::io::ensure_parent(path)?;
    let err = plot_err(path);
    let n = groups.len();
    let (y0, y1) = range(groups.iter().flat_map(|g| g.1.iter().copied()), 0.1);
    let labels: Vec<String> = groups.iter().map(|g| g.0.clone()).collect();
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..n as f64, y0..y1)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc(y_label)
        .x_labels(n.max(1) * 2 + 1)
        .x_label_formatter(&|x| {
            let slot = x - 0.5;
            let i = slot.round();
            if (slot - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                labels[i as usize].clone()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(&err)?;
    for (i, (_, values)) in groups.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let mut s = values.clone();
        s.sort_by(f64::total_cmp);
        let q = [0.0, 0.25, 0.5, 0.75, 1.0].map(|p| quantile(&s, p));
        let c = i as f64 + 0.5;
        let color = palette(i);
        chart
            .draw_series([
                Rectangle::new([(c - 0.2, q[1]), (c + 0.2, q[3])], color.mix(0.35).filled()),
                Rectangle::new([(c - 0.2, q[1]), (c + 0.2, q[3])], color.stroke_width(2)),
            ])
            .map_err(&err)?;
        chart
            .draw_series([
                PathElement::new(vec![(c - 0.2, q[2]), (c + 0.2, q[2])], BLACK.stroke_width(2)),
                PathElement::new(vec![(c, q[0]), (c, q[1])], color.stroke_width(1)),
                PathElement::new(vec![(c, q[3]), (c, q[4])], color.stroke_width(1)),
                PathElement::new(vec![(c - 0.1, q[0]), (c + 0.1, q[0])], color.stroke_width(1)),
                PathElement::new(vec![(c - 0.1, q[4]), (c + 0.1, q[4])], color.stroke_width(1)),
            ])
            .map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

/// Two-class scatter: members in red, non-members in blue.
pub fn membership_scatter(path: &Path, title: &str, points: &[(f64, f64, u8)]) -> Result<()> {
    ensure_font();
    crate::io::ensure_parent(path)?;
    let err = plot_err(path);
    let (x0, x1) = range(points.iter().map(|p| p.0), 0.05);
    let (y0, y1) = range(points.iter().map(|p| p.1), 0.05);
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(&err)?;
    chart.configure_mesh().x_desc("PC 1").y_desc("PC 2").draw().map_err(&err)?;
    for (label, name, color) in [(0u8, "non-member", RGBColor(31, 119, 180)), (1, "member", RGBColor(214, 39, 40))] {
        chart
            .draw_series(
                points
                    .iter()
                    .filter(|p| p.2 == label)
                    .map(|p| Circle::new((p.0, p.1), 2, color.mix(0.55).filled())),
            )
            .map_err(&err)?
            .label(name)
            .legend(move |(x, y)| Circle::new((x + 8, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}
