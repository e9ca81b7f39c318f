//! Diagnostic exports: 2D PCA of embeddings, ρ histograms and loss curves,
//! written as CSV and plain SVG.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Top-two principal axes of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    /// Covariance eigenvalues of the two axes, largest first.
    pub variances: [f64; 2],
}

impl Pca2 {
    /// Eigen-decompose the population covariance. Axis signs are fixed so the
    /// largest-magnitude coordinate of each axis is positive.
    pub fn fit(points: &Matrix) -> Result<Self> {
        let (n, d) = points.shape();
        if n < 2 || d < 2 {
            return Err(Error::Argument(format!("PCA needs at least 2×2 data, got {n}×{d}")));
        }
        let x = DMatrix::from_row_slice(n, d, points.data());
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axis = |k: usize| {
            let col: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            let pivot = col
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|v| v * sign).collect()
        };
        Ok(Self {
            mean: mean.iter().copied().collect(),
            axes: [axis(0), axis(1)],
            variances: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        })
    }

    pub fn project(&self, points: &Matrix) -> Result<Vec<[f64; 2]>> {
        if points.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "PCA fitted on {} dims, got {}",
                self.mean.len(),
                points.cols()
            )));
        }
        Ok(points
            .row_iter()
            .map(|row| {
                let proj = |axis: &[f64]| {
                    row.iter()
                        .zip(&self.mean)
                        .zip(axis)
                        .map(|((x, m), a)| (x - m) * a)
                        .sum()
                };
                [proj(&self.axes[0]), proj(&self.axes[1])]
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 || values.is_empty() {
            return Err(Error::Argument("histogram needs values and at least one bin".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("histogram of non-finite values".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        out
    }

    pub fn to_svg(&self, title: &str, x_label: &str) -> String {
        let frame = Frame::new(
            (self.edges[0], *self.edges.last().unwrap()),
            (0.0, *self.counts.iter().max().unwrap_or(&1) as f64),
        );
        let mut svg = frame.open(title, x_label, "instances");
        for (i, &c) in self.counts.iter().enumerate() {
            let (x0, y0) = frame.map(self.edges[i], c as f64);
            let (x1, y1) = frame.map(self.edges[i + 1], 0.0);
            let _ = writeln!(
                svg,
                r##"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0" stroke="white"/>"##,
                x1 - x0,
                y1 - y0
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Circle,
    Square,
}

/// Scatter plot; colour cycles by `label`, shape by `marker`.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[usize], markers: &[Marker], title: &str) -> Result<String> {
    if points.len() != labels.len() || points.len() != markers.len() {
        return Err(Error::Shape("points, labels and markers differ in length".into()));
    }
    let range = |k: usize| {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        if points.is_empty() {
            (0.0, 1.0)
        } else {
            (lo, hi)
        }
    };
    let frame = Frame::new(range(0), range(1));
    let mut svg = frame.open(title, "PC1", "PC2");
    for ((p, &l), &m) in points.iter().zip(labels).zip(markers) {
        let (x, y) = frame.map(p[0], p[1]);
        let color = PALETTE[l % PALETTE.len()];
        let _ = match m {
            Marker::Circle => writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#
            ),
            Marker::Square => writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="none" stroke="{color}"/>"#,
                x - 3.0,
                y - 3.0
            ),
        };
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Line chart of named `(x, y)` series; non-finite points are skipped.
pub fn line_svg(series: &[(String, Vec<(f64, f64)>)], title: &str, x_label: &str) -> Result<String> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::Argument("no finite points to plot".into()));
    }
    let min_max = |f: fn(&(f64, f64)) -> f64| {
        pts.iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let frame = Frame::new(min_max(|p| p.0), min_max(|p| p.1));
    let mut svg = frame.open(title, x_label, "");
    for (k, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = s
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = frame.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            frame.width - frame.margin + 6.0,
            frame.margin + 14.0 * k as f64 + 10.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Numeric columns of a CSV table; empty cells become NaN.
pub fn read_csv_columns(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Load("empty CSV".into()))?;
    let mut cols: Vec<(String, Vec<f64>)> = header.split(',').map(|h| (h.to_string(), Vec::new())).collect();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::Load(format!("CSV row {} has {} cells", i + 2, cells.len())));
        }
        for (col, cell) in cols.iter_mut().zip(cells) {
            col.1.push(if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse()
                    .map_err(|_| Error::Load(format!("CSV row {}: bad number `{cell}`", i + 2)))?
            });
        }
    }
    Ok(cols)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    width: f64,
    height: f64,
    margin: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self {
            width: 640.0,
            height: 420.0,
            margin: 50.0,
            x: widen(x),
            y: widen(y),
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.width - 2.0 * self.margin;
        let h = self.height - 2.0 * self.margin;
        (
            self.margin + (x - self.x.0) / (self.x.1 - self.x.0) * w,
            self.height - self.margin - (y - self.y.0) / (self.y.1 - self.y.0) * h,
        )
    }

    fn open(&self, title: &str, x_label: &str, y_label: &str) -> String {
        let (w, h, m) = (self.width, self.height, self.margin);
        let mut s = format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
        );
        s.push('\n');
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            w - 2.0 * m,
            h - 2.0 * m
        );
        let _ = writeln!(s, r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
            w / 2.0,
            h - 12.0,
            escape(x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            h / 2.0,
            h / 2.0,
            escape(y_label)
        );
        for (v, (px, py)) in [
            (self.x.0, (m, h - m + 14.0)),
            (self.x.1, (w - m, h - m + 14.0)),
        ] {
            let _ = writeln!(s, r#"<text x="{px}" y="{py}" font-size="10" text-anchor="middle">{v:.3}</text>"#);
        }
        for (v, py) in [(self.y.0, h - m), (self.y.1, m + 4.0)] {
            let _ = writeln!(s, r#"<text x="{}" y="{py}" font-size="10" text-anchor="end">{v:.3}</text>"#, m - 4.0);
        }
        s
    }
}
