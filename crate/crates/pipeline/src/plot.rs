//! Predicted versus groundtruth occasion energy, one colored series per method.

use std::path::Path;

use plotters::prelude::*;
use plotters::style::register_font;

use crate::error::{PipelineError, Result};
use crate::io::ensure_parent;
use crate::render::{LabelFont, PALETTE};

const FONT_FAMILY: &str = "foodlens-sans";

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSeries {
    pub name: String,
    /// `(groundtruth, predicted)` kcal per occasion.
    pub points: Vec<(f64, f64)>,
}

/// Upper end shared by both axes: the largest value plus a 10% margin.
pub fn axis_limit(series: &[ScatterSeries]) -> f64 {
    let max = series
        .iter()
        .flat_map(|s| s.points.iter())
        .flat_map(|&(g, p)| [g, p])
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    if max > 0.0 {
        max * 1.1
    } else {
        1.0
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Plot(e.to_string())
}

pub fn plot_scatter(series: &[ScatterSeries], font: &LabelFont, path: &Path) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(PipelineError::Plot("no occasion pairs to plot".into()));
    }
    register_font(FONT_FAMILY, FontStyle::Normal, font.bytes).map_err(|_| plot_err("font rejected by the plot backend"))?;
    ensure_parent(path)?;
    let limit = axis_limit(series);
    let root = BitMapBackend::new(path, (720, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Energy per eating occasion", (FONT_FAMILY, 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..limit, 0.0..limit)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("groundtruth energy (kcal)")
        .y_desc("estimated energy (kcal)")
        .label_style((FONT_FAMILY, 14))
        .x_label_formatter(&|v| format!("{v:.0}"))
        .y_label_formatter(&|v| format!("{v:.0}"))
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(DashedLineSeries::new(vec![(0.0, 0.0), (limit, limit)], 8, 6, BLACK.stroke_width(1)))
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let [r, g, b] = PALETTE[i % PALETTE.len()];
        let color = RGBColor(r, g, b);
        chart
            .draw_series(s.points.iter().map(|&(x, y)| Circle::new((x, y), 4, color.filled())))
            .map_err(plot_err)?
            .label(s.name.as_str())
            .legend(move |(x, y)| Circle::new((x + 8, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .label_font((FONT_FAMILY, 14))
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
