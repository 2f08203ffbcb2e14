//! Static PNG figures: prediction scatter, pseudo-MOS histograms per
//! workflow group, the QP trend of the three groups, and QRS selection maps.
//!
//! Rendering is plain rasterization on an RGB buffer, so identical inputs
//! give identical bytes.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{invalid, Result};
use crate::qrs::SelectionTrace;
use crate::trainer::EvalReport;
use crate::worksim::{CorpusManifest, QP_INTERVALS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Scatter,
    MosHist,
    QpTrend,
    SelectionMap,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [PlotKind::Scatter, PlotKind::MosHist, PlotKind::QpTrend, PlotKind::SelectionMap];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Scatter => "scatter",
            PlotKind::MosHist => "mos-hist",
            PlotKind::QpTrend => "qp-trend",
            PlotKind::SelectionMap => "selection-map",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown plot kind {s:?} (expected scatter, mos-hist, qp-trend or selection-map)")))
    }
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const RED: Rgb<u8> = Rgb([214, 39, 40]);
/// Group 1, 2, 3 colors.
const GROUP: [Rgb<u8>; 3] = [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44])];

/// 3×5 glyphs, one row per `u8` (low three bits, MSB left).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        _ => return None,
    })
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self { img: RgbImage::from_pixel(w, h, WHITE) }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn outline(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, width: i64, c: Rgb<u8>) {
        for k in 0..width {
            self.line(x0 + k, y0 + k, x1 - k, y0 + k, c);
            self.line(x0 + k, y1 - k, x1 - k, y1 - k, c);
            self.line(x0 + k, y0 + k, x0 + k, y1 - k, c);
            self.line(x1 - k, y0 + k, x1 - k, y1 - k, c);
        }
    }

    /// Bresenham.
    fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn dot(&mut self, x: i64, y: i64, r: i64, c: Rgb<u8>) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(x + dx, y + dy, c);
                }
            }
        }
    }

    /// Draws `s` at 2× scale with its top-left corner at `(x, y)`; unknown
    /// characters leave a gap.
    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        for (i, ch) in s.chars().enumerate() {
            if let Some(rows) = glyph(ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for b in 0..3 {
                        if bits & (4 >> b) != 0 {
                            let (px, py) = (x + 8 * i as i64 + 2 * b, y + 2 * r as i64);
                            self.rect(px, py, px + 1, py + 1, c);
                        }
                    }
                }
            }
        }
    }
}

/// Plot area in pixel coordinates with a data-to-pixel mapping.
struct Axes {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> i64 {
        self.x0 + ((x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        self.y0 + self.h - ((y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h as f64).round() as i64
    }

    /// Frame, light grid lines at `ticks` divisions and numeric tick labels.
    fn draw(&self, cv: &mut Canvas, ticks: usize, labels: bool) {
        for k in 0..=ticks {
            let f = k as f64 / ticks as f64;
            let gx = self.x0 + (f * self.w as f64).round() as i64;
            let gy = self.y0 + self.h - (f * self.h as f64).round() as i64;
            cv.line(gx, self.y0, gx, self.y0 + self.h, GRID);
            cv.line(self.x0, gy, self.x0 + self.w, gy, GRID);
            if labels {
                let xv = self.xr.0 + f * (self.xr.1 - self.xr.0);
                let yv = self.yr.0 + f * (self.yr.1 - self.yr.0);
                cv.text(gx - 8, self.y0 + self.h + 6, &format!("{xv:.1}"), BLACK);
                cv.text(self.x0 - 30, gy - 5, &format!("{yv:.1}"), BLACK);
            }
        }
        cv.outline(self.x0, self.y0, self.x0 + self.w, self.y0 + self.h, 1, BLACK);
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    Some((lo - pad, hi + pad))
}

/// Predicted score against pseudo-MOS, one dot per clip, with the
/// least-squares line.
pub fn scatter(report: &EvalReport) -> Result<RgbImage> {
    let pts: Vec<(f64, f64)> =
        report.predictions.iter().filter_map(|(id, &p)| report.targets.get(id).map(|&m| (p, m))).collect();
    if pts.is_empty() {
        return Err(invalid("evaluation report has no clips with both a prediction and a target"));
    }
    if pts.iter().any(|(p, m)| !p.is_finite() || !m.is_finite()) {
        return Err(invalid("evaluation report contains non-finite values"));
    }
    let xr = padded_range(pts.iter().map(|p| p.0)).unwrap();
    let yr = padded_range(pts.iter().map(|p| p.1)).unwrap();
    let mut cv = Canvas::new(480, 400);
    let ax = Axes { x0: 50, y0: 20, w: 410, h: 340, xr, yr };
    ax.draw(&mut cv, 4, true);
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx > 0.0 {
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
        let f = |x: f64| my + slope * (x - mx);
        cv.line(ax.px(xr.0), ax.py(f(xr.0)), ax.px(xr.1), ax.py(f(xr.1)), RED);
    }
    for &(p, m) in &pts {
        cv.dot(ax.px(p), ax.py(m), 2, GROUP[0]);
    }
    Ok(cv.img)
}

/// Pseudo-MOS histogram of each workflow group on a shared `[1, 5]` axis,
/// one panel per group stacked vertically.
pub fn mos_histogram(manifest: &CorpusManifest, bins: usize) -> Result<RgbImage> {
    if manifest.clips.is_empty() {
        return Err(invalid("corpus manifest has no clips"));
    }
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    let mut counts = vec![vec![0usize; bins]; 3];
    for c in &manifest.clips {
        let b = (((c.pseudo_mos - 1.0) / 4.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[(c.group - 1) as usize][b] += 1;
    }
    let peak = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let (pw, ph) = (420i64, 110i64);
    let mut cv = Canvas::new(480, (3 * (ph + 30) + 20) as u32);
    for (g, row) in counts.iter().enumerate() {
        let ax = Axes { x0: 40, y0: 15 + g as i64 * (ph + 30), w: pw, h: ph, xr: (1.0, 5.0), yr: (0.0, peak) };
        ax.draw(&mut cv, 4, g == 2);
        let bw = pw as f64 / bins as f64;
        for (b, &k) in row.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let xa = ax.x0 + (b as f64 * bw).round() as i64 + 1;
            let xb = ax.x0 + ((b + 1) as f64 * bw).round() as i64 - 1;
            cv.rect(xa, ax.py(k as f64), xb, ax.y0 + ax.h - 1, GROUP[g]);
        }
        cv.text(ax.x0 + ax.w - 10, ax.y0 + 4, &format!("{}", g + 1), GROUP[g]);
    }
    Ok(cv.img)
}

/// Mean pseudo-MOS per QP interval for each workflow group, one panel per
/// group side by side. Group 1's curve is repeated in grey in the other
/// panels as the transcode-only reference.
pub fn qp_trend(manifest: &CorpusManifest) -> Result<RgbImage> {
    if manifest.clips.is_empty() {
        return Err(invalid("corpus manifest has no clips"));
    }
    let n = QP_INTERVALS.len();
    let mut sums = vec![vec![(0.0, 0usize); n]; 3];
    for c in &manifest.clips {
        let e = &mut sums[(c.group - 1) as usize][c.recipe.qp_interval_index];
        e.0 += c.pseudo_mos;
        e.1 += 1;
    }
    let means: Vec<Vec<Option<f64>>> =
        sums.iter().map(|g| g.iter().map(|&(s, k)| (k > 0).then(|| s / k as f64)).collect()).collect();
    let (pw, ph) = (200i64, 260i64);
    let mut cv = Canvas::new((3 * (pw + 40) + 30) as u32, (ph + 50) as u32);
    let grey = Rgb([170, 170, 170]);
    for g in 0..3 {
        let ax = Axes { x0: 40 + g as i64 * (pw + 40), y0: 15, w: pw, h: ph, xr: (0.5, n as f64 + 0.5), yr: (1.0, 5.0) };
        ax.draw(&mut cv, 4, false);
        for k in 0..=4 {
            let y = 1.0 + k as f64;
            cv.text(ax.x0 - 12, ax.py(y) - 5, &format!("{y:.0}"), BLACK);
        }
        for i in 0..n {
            cv.text(ax.px(i as f64 + 1.0) - 2, ax.y0 + ax.h + 6, &format!("{}", i + 1), BLACK);
        }
        let mut curves = vec![(&means[g], GROUP[g])];
        if g > 0 {
            curves.insert(0, (&means[0], grey));
        }
        for (curve, color) in curves {
            let pts: Vec<(i64, i64)> = curve
                .iter()
                .enumerate()
                .filter_map(|(i, m)| m.map(|m| (ax.px(i as f64 + 1.0), ax.py(m))))
                .collect();
            for w in pts.windows(2) {
                cv.line(w[0].0, w[0].1, w[1].0, w[1].1, color);
                cv.line(w[0].0, w[0].1 + 1, w[1].0, w[1].1 + 1, color);
            }
            for &(x, y) in &pts {
                cv.dot(x, y, 3, color);
            }
        }
    }
    Ok(cv.img)
}

/// Patch-importance heat map of each trace (blue low, red high) with the
/// chosen window outlined, traces tiled four per row.
pub fn selection_map(traces: &[SelectionTrace]) -> Result<RgbImage> {
    if traces.is_empty() {
        return Err(invalid("no selection traces to draw"));
    }
    let cell = 16i64;
    let side = traces.iter().map(|t| t.grid_side).max().unwrap() as i64;
    let tile = side * cell + 16;
    let cols = traces.len().min(4) as i64;
    let rows = traces.len().div_ceil(4) as i64;
    let mut cv = Canvas::new((cols * tile + 8) as u32, (rows * tile + 8) as u32);
    for (n, t) in traces.iter().enumerate() {
        let s = t.grid_side;
        if t.patch_scores.len() != s * s || t.window_side == 0 || t.window_side > s {
            return Err(invalid(format!("malformed selection trace for clip {}", t.clip_id)));
        }
        let (ox, oy) = (8 + (n as i64 % 4) * tile, 8 + (n as i64 / 4) * tile);
        let (lo, hi) = t.patch_scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for (k, &v) in t.patch_scores.iter().enumerate() {
            let f = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let c = Rgb([(255.0 * f).round() as u8, 60, (255.0 * (1.0 - f)).round() as u8]);
            let (r, col) = ((k / s) as i64, (k % s) as i64);
            cv.rect(ox + col * cell, oy + r * cell, ox + (col + 1) * cell - 2, oy + (r + 1) * cell - 2, c);
        }
        let (ar, ac) = (t.window_anchor.0 as i64, t.window_anchor.1 as i64);
        let w = t.window_side as i64;
        cv.outline(ox + ac * cell - 2, oy + ar * cell - 2, ox + (ac + w) * cell, oy + (ar + w) * cell, 2, BLACK);
    }
    Ok(cv.img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(anchor: (usize, usize)) -> SelectionTrace {
        SelectionTrace {
            clip_id: "c".into(),
            grid_side: 9,
            window_side: 7,
            patch_scores: (0..81).map(|v| (v as f64 * 0.37).sin()).collect(),
            window_scores: vec![0.0; 9],
            chosen_window: 0,
            window_anchor: anchor,
            hard_indices: vec![],
            soft_indicator: vec![],
        }
    }

    #[test]
    fn kinds_round_trip_and_reject_unknown() {
        for k in PlotKind::ALL {
            assert_eq!(k.name().parse::<PlotKind>().unwrap(), k);
        }
        assert!("pie".parse::<PlotKind>().is_err());
    }

    #[test]
    fn selection_window_is_outlined_at_its_anchor() {
        let img = selection_map(&[trace((1, 2))]).unwrap();
        // top-left corner of the outline: origin 8 + anchor·16 − 2
        assert_eq!(*img.get_pixel(8 + 2 * 16 - 2, 8 + 16 - 2), BLACK);
        assert_eq!(*img.get_pixel(8 + 9 * 16, 8 + 8 * 16), BLACK);
        // a cell outside the window keeps its heat color
        assert_ne!(*img.get_pixel(8 + 4, 8 + 4), BLACK);
    }

    #[test]
    fn same_input_same_bytes() {
        let a = encode_png(&selection_map(&[trace((0, 0)), trace((2, 2))]).unwrap()).unwrap();
        let b = encode_png(&selection_map(&[trace((0, 0)), trace((2, 2))]).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[1..4], b"PNG");
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(selection_map(&[]).is_err());
    }
}
