//! Alignment heatmaps as standalone SVG plus a plain-text matrix sidecar.
//!
//! Matrices are passed frame-major (`[T, L]`), the layout in which the
//! reconstructed attention has columns summing to one. Heatmaps draw
//! output steps on the vertical axis and input frames on the horizontal.

use std::fmt::Write as _;

use crate::{Error, Result, Tensor};

const CELL: f64 = 8.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 40.0;
const GAP: f64 = 30.0;

/// One titled heatmap.
#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    /// `[T, L]` weights.
    pub matrix: Tensor<f64>,
}

impl Panel {
    pub fn new(title: impl Into<String>, matrix: Tensor<f64>) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::dim("heatmap", format!("expected a matrix, got shape {:?}", matrix.shape())));
        }
        Ok(Self {
            title: title.into(),
            matrix,
        })
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders panels stacked vertically, one `<rect>` per cell, darker for
/// larger weights (scaled to each panel's maximum).
pub fn render_svg(panels: &[Panel]) -> String {
    let width = panels
        .iter()
        .map(|p| p.matrix.rows() as f64 * CELL)
        .fold(0.0, f64::max)
        + MARGIN_LEFT
        + 20.0;
    let height: f64 = panels
        .iter()
        .map(|p| p.matrix.cols() as f64 * CELL + MARGIN_TOP + MARGIN_BOTTOM + GAP)
        .sum();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let mut y0 = 0.0;
    for p in panels {
        let (t, l) = (p.matrix.rows(), p.matrix.cols());
        let max = p.matrix.data().iter().copied().fold(0.0f64, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let top = y0 + MARGIN_TOP;
        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(s, r#"<text x="{MARGIN_LEFT}" y="{}">{}</text>"#, top - 10.0, escape(&p.title));
        for j in 0..l {
            for i in 0..t {
                let w = (p.matrix.at(i, j) * scale).clamp(0.0, 1.0);
                let g = (255.0 * (1.0 - w)).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"/>"#,
                    MARGIN_LEFT + i as f64 * CELL,
                    top + j as f64 * CELL,
                );
            }
        }
        let bottom = top + l as f64 * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">input frame step</text>"#,
            MARGIN_LEFT + t as f64 * CELL / 2.0,
            bottom + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">output step</text>"#,
            top + l as f64 * CELL / 2.0
        );
        let _ = writeln!(s, "</g>");
        y0 = bottom + MARGIN_BOTTOM + GAP;
    }
    s.push_str("</svg>\n");
    s
}

/// One line per frame, whitespace-separated weights, full precision.
pub fn matrix_to_text(m: &Tensor<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_matrix_text(text: &str) -> Result<Tensor<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed {
                line: n + 1,
                detail: e.to_string(),
            })?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::Malformed {
                    line: n + 1,
                    detail: format!("expected {c} values, found {}", vals.len()),
                })
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(&[rows, cols.unwrap_or(0)], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_cell_and_axis_labels() {
        let m = Tensor::new(&[3, 2], vec![0.5, 0.0, 0.5, 0.2, 0.0, 0.8]).unwrap();
        let svg = render_svg(&[
            Panel::new("baseline", m.clone()).unwrap(),
            Panel::new("oracle", m).unwrap(),
        ]);
        assert_eq!(svg.matches("<rect").count(), 12);
        assert_eq!(svg.matches("input frame step").count(), 2);
        assert_eq!(svg.matches("output step").count(), 2);
        assert!(svg.contains("rgb(0,0,0)"));
        assert!(svg.contains("rgb(255,255,255)"));
    }

    #[test]
    fn sidecar_round_trip() {
        let m = Tensor::new(&[2, 3], vec![0.1, 0.2, 1.0 / 3.0, 0.9, 0.8, 2.0 / 3.0]).unwrap();
        assert_eq!(parse_matrix_text(&matrix_to_text(&m)).unwrap(), m);
        assert!(parse_matrix_text("1 2\n3\n").is_err());
    }
}
