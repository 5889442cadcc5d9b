//! Static SVG rendering of loss curves and metric tables.

use std::fs;
use std::path::{Path, PathBuf};

use imfuse::{Error, Result};
use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};

/// A tab-separated table: first column holds row labels, the rest numbers
/// (`NA` for missing cells).
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

/// Curve points grouped by term, in first-seen order.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlotInput {
    Curves(Curves),
    Table(Table),
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::contract(format!("{}: {msg}", path.display()))
}

pub fn parse_input(path: &Path, text: &str) -> Result<PlotInput> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(path, "empty file"))?.split('\t').collect();
    if header == ["epoch", "term", "value"] {
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for l in lines {
            let f: Vec<&str> = l.split('\t').collect();
            let (Some(e), Some(term), Some(v)) = (f.first(), f.get(1), f.get(2)) else { return Err(bad(path, format!("bad row {l:?}"))) };
            let e: f64 = e.parse().map_err(|_| bad(path, format!("bad epoch in {l:?}")))?;
            let v: f64 = v.parse().map_err(|_| bad(path, format!("bad value in {l:?}")))?;
            match series.iter_mut().find(|s| s.0 == *term) {
                Some(s) => s.1.push((e, v)),
                None => series.push((term.to_string(), vec![(e, v)])),
            }
        }
        return Ok(PlotInput::Curves(Curves { series }));
    }
    if header.len() < 2 {
        return Err(bad(path, "expected a loss curve or a table with at least one value column"));
    }
    let columns: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for l in lines {
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != header.len() {
            return Err(bad(path, format!("row {l:?} has {} fields, header has {}", f.len(), header.len())));
        }
        rows.push(f[0].to_string());
        cells.push(
            f[1..]
                .iter()
                .map(|v| if *v == "NA" { Ok(None) } else { v.parse().map(Some).map_err(|_| bad(path, format!("bad number {v:?}"))) })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(PlotInput::Table(Table { columns, rows, cells }))
}

fn draw_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn plot_curves(curves: &Curves, title: &str, path: &Path) -> Result<()> {
    let points = curves.series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points.filter(|p| p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| draw_err(path, e))?;
    chart.configure_mesh().x_desc("epoch").y_desc("loss").draw().map_err(|e| draw_err(path, e))?;
    for (i, (term, pts)) in curves.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied().filter(|p| p.1.is_finite()), color.stroke_width(2)))
            .map_err(|e| draw_err(path, e))?
            .label(term.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(path, e))?;
    root.present().map_err(|e| draw_err(path, e))
}

fn heat(v: f64) -> RGBColor {
    let t = v.clamp(0.0, 1.0);
    RGBColor((255.0 - 205.0 * t) as u8, (255.0 - 135.0 * t) as u8, (255.0 - 35.0 * t) as u8)
}

/// One cell per (row, column) pair; values are assumed to lie in `[0, 1]`.
pub fn plot_heatmap(table: &Table, title: &str, path: &Path) -> Result<()> {
    const CELL_W: i32 = 120;
    const CELL_H: i32 = 30;
    const LEFT: i32 = 140;
    const TOP: i32 = 70;
    let w = LEFT + CELL_W * table.columns.len() as i32 + 20;
    let h = TOP + CELL_H * table.rows.len() as i32 + 20;
    let root = SVGBackend::new(path, (w as u32, h as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let font = ("sans-serif", 14).into_font();
    let centered = font.clone().into_text_style(&root).pos(Pos::new(HPos::Center, VPos::Center));
    root.draw(&Text::new(title.to_string(), (12, 20), ("sans-serif", 18).into_font())).map_err(|e| draw_err(path, e))?;
    for (j, c) in table.columns.iter().enumerate() {
        let x = LEFT + CELL_W * j as i32 + CELL_W / 2;
        root.draw(&Text::new(c.clone(), (x, TOP - 14), centered.clone())).map_err(|e| draw_err(path, e))?;
    }
    for (i, (label, row)) in table.rows.iter().zip(&table.cells).enumerate() {
        let y = TOP + CELL_H * i as i32;
        root.draw(&Text::new(label.clone(), (12, y + CELL_H / 2 - 7), font.clone())).map_err(|e| draw_err(path, e))?;
        for (j, v) in row.iter().enumerate() {
            let x = LEFT + CELL_W * j as i32;
            let fill = v.map_or(RGBColor(230, 230, 230), heat);
            root.draw(&Rectangle::new([(x, y), (x + CELL_W, y + CELL_H)], fill.filled())).map_err(|e| draw_err(path, e))?;
            root.draw(&Rectangle::new([(x, y), (x + CELL_W, y + CELL_H)], WHITE.stroke_width(1))).map_err(|e| draw_err(path, e))?;
            let text = v.map_or("NA".to_string(), |v| format!("{v:.3}"));
            root.draw(&Text::new(text, (x + CELL_W / 2, y + CELL_H / 2), centered.clone())).map_err(|e| draw_err(path, e))?;
        }
    }
    root.present().map_err(|e| draw_err(path, e))
}

/// Renders `input` to an SVG next to it and returns the image path.
pub fn plot_file(input: &Path) -> Result<PathBuf> {
    if !input.is_file() {
        return Err(Error::io(input, std::io::Error::new(std::io::ErrorKind::NotFound, "plot input not found")));
    }
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let out = input.with_extension("svg");
    let title = input.file_stem().map_or_else(String::new, |s| s.to_string_lossy().replace('_', " "));
    match parse_input(input, &text)? {
        PlotInput::Curves(c) => plot_curves(&c, &title, &out)?,
        PlotInput::Table(t) => plot_heatmap(&t, &title, &out)?,
    }
    Ok(out)
}
