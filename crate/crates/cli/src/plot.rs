//! Minimal deterministic PNG figures: line charts, paired histograms, and
//! image grids, labeled with an 8×8 bitmap font. Every figure is a pure
//! function of its inputs, so rerunning a stage rewrites byte-identical
//! files.

use std::path::Path;

use genrc_core::error::{Error, Result};
use genrc_core::ImageBatch;
use image::RgbImage;

pub type Color = [u8; 3];

/// Series colors, cycled.
pub const PALETTE: [Color; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const BG: Color = [255, 255, 255];
const FG: Color = [25, 25, 25];
const GRID: Color = [225, 225, 225];
const GLYPH: usize = 8;

/// Bounds-checked RGB raster with line and text primitives.
pub struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Canvas {
        let mut img = RgbImage::new(width, height);
        for p in img.pixels_mut() {
            p.0 = BG;
        }
        Canvas { img }
    }

    pub fn width(&self) -> i64 {
        self.img.width() as i64
    }

    pub fn height(&self) -> i64 {
        self.img.height() as i64
    }

    pub fn put(&mut self, x: i64, y: i64, c: Color) {
        if x >= 0 && y >= 0 && x < self.width() && y < self.height() {
            self.img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    }

    /// Bresenham segment between rounded endpoints.
    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Color) {
        let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                return;
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

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Color) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    /// Draw `s` with its top-left corner at (x, y).
    pub fn text(&mut self, x: i64, y: i64, s: &str, c: Color) {
        for (i, ch) in s.chars().enumerate() {
            let idx = ch as usize;
            let glyph = if idx < 128 {
                font8x8::legacy::BASIC_LEGACY[idx]
            } else {
                font8x8::legacy::BASIC_LEGACY[b'?' as usize]
            };
            let gx = x + (i * GLYPH) as i64;
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..GLYPH {
                    if bits >> col & 1 == 1 {
                        self.put(gx + col as i64, y + row as i64, c);
                    }
                }
            }
        }
    }

    /// Draw `s` ending at x (right-aligned).
    pub fn text_right(&mut self, x: i64, y: i64, s: &str, c: Color) {
        self.text(x - (s.chars().count() * GLYPH) as i64, y, s, c);
    }

    /// Draw `s` centered on x.
    pub fn text_center(&mut self, x: i64, y: i64, s: &str, c: Color) {
        self.text(x - (s.chars().count() * GLYPH / 2) as i64, y, s, c);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.img
            .save(path)
            .map_err(|e| Error::config(format!("writing figure {}: {e}", path.display())))
    }
}

/// Compact tick label: fixed-point for ordinary magnitudes, scientific
/// outside them, trailing zeros trimmed.
pub fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let mut s = format!("{v:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

/// One polyline of a chart.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.left + (v - self.x0) / (self.x1 - self.x0) * (self.right - self.left)
    }

    fn y(&self, v: f64) -> f64 {
        self.bottom - (v - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)
    }
}

/// Pad a degenerate range so division by the span is safe.
fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn draw_frame(cv: &mut Canvas, f: &Frame, title: &str, x_label: &str, y_label: &str) {
    cv.text_center(cv.width() / 2, 6, title, FG);
    cv.text_center((f.left + f.right) as i64 / 2, cv.height() - 14, x_label, FG);
    cv.text(4, 6, y_label, FG);
    const TICKS: usize = 5;
    for i in 0..TICKS {
        let t = i as f64 / (TICKS - 1) as f64;
        let xv = f.x0 + t * (f.x1 - f.x0);
        let yv = f.y0 + t * (f.y1 - f.y0);
        let px = f.x(xv);
        let py = f.y(yv);
        cv.line((px, f.top), (px, f.bottom), GRID);
        cv.line((f.left, py), (f.right, py), GRID);
        cv.text_center(px as i64, f.bottom as i64 + 6, &fmt_tick(xv), FG);
        cv.text_right(f.left as i64 - 5, py as i64 - 4, &fmt_tick(yv), FG);
    }
    cv.line((f.left, f.top), (f.left, f.bottom), FG);
    cv.line((f.left, f.bottom), (f.right, f.bottom), FG);
}

fn draw_legend(cv: &mut Canvas, f: &Frame, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = f.top as i64 + 8 + 14 * i as i64;
        let x = f.right as i64 - (label.chars().count() * GLYPH) as i64 - 18;
        cv.fill_rect(x, y, x + 10, y + 7, PALETTE[i % PALETTE.len()]);
        cv.text(x + 14, y, label, FG);
    }
}

/// Line chart of one or more series, colored from [`PALETTE`].
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    path: &Path,
) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::argument("line chart needs at least one point"));
    }
    let pts = || series.iter().flat_map(|s| s.points.iter().copied());
    let (x0, x1) = widen(
        pts().map(|p| p.0).fold(f64::INFINITY, f64::min),
        pts().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (mut y0, mut y1) = widen(
        pts().map(|p| p.1).fold(f64::INFINITY, f64::min),
        pts().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;

    let mut cv = Canvas::new(640, 440);
    let f = Frame {
        left: 64.0,
        right: cv.width() as f64 - 16.0,
        top: 28.0,
        bottom: cv.height() as f64 - 44.0,
        x0,
        x1,
        y0,
        y1,
    };
    draw_frame(&mut cv, &f, title, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for w in s.points.windows(2) {
            cv.line((f.x(w[0].0), f.y(w[0].1)), (f.x(w[1].0), f.y(w[1].1)), c);
        }
        for &(x, y) in &s.points {
            let (px, py) = (f.x(x) as i64, f.y(y) as i64);
            cv.fill_rect(px - 1, py - 1, px + 1, py + 1, c);
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    draw_legend(&mut cv, &f, &labels);
    cv.save(path)
}

/// Two score distributions as side-by-side bars per bin — the standard
/// in-distribution vs out-distribution separation picture.
pub fn histogram_pair(
    title: &str,
    x_label: &str,
    a: (&str, &[f64]),
    b: (&str, &[f64]),
    bins: usize,
    path: &Path,
) -> Result<()> {
    let finite = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite());
    if bins == 0 || finite(a.1).count() == 0 || finite(b.1).count() == 0 {
        return Err(Error::argument("histogram needs bins and finite values on both sides"));
    }
    let all = || finite(a.1).chain(finite(b.1));
    let (lo, hi) = widen(
        all().fold(f64::INFINITY, f64::min),
        all().fold(f64::NEG_INFINITY, f64::max),
    );
    let count = |v: &[f64]| {
        let mut c = vec![0usize; bins];
        for x in finite(v) {
            let t = ((x - lo) / (hi - lo) * bins as f64) as usize;
            c[t.min(bins - 1)] += 1;
        }
        c
    };
    let ca = count(a.1);
    let cb = count(b.1);
    let peak = ca.iter().chain(cb.iter()).copied().max().unwrap_or(1).max(1);

    let mut cv = Canvas::new(640, 440);
    let f = Frame {
        left: 64.0,
        right: cv.width() as f64 - 16.0,
        top: 28.0,
        bottom: cv.height() as f64 - 44.0,
        x0: lo,
        x1: hi,
        y0: 0.0,
        y1: peak as f64 * 1.05,
    };
    draw_frame(&mut cv, &f, title, x_label, "count");
    for (side, counts) in [(0usize, &ca), (1, &cb)] {
        for (i, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let l = f.x(lo + (hi - lo) * i as f64 / bins as f64);
            let r = f.x(lo + (hi - lo) * (i + 1) as f64 / bins as f64);
            let mid = (l + r) / 2.0;
            let (bl, br) = if side == 0 { (l + 1.0, mid) } else { (mid, r - 1.0) };
            cv.fill_rect(
                bl as i64,
                f.y(n as f64) as i64,
                br as i64,
                f.bottom as i64 - 1,
                PALETTE[side],
            );
        }
    }
    draw_legend(&mut cv, &f, &[a.0, b.0]);
    cv.save(path)
}

/// Tile a batch of images into a grid. Grayscale and RGB batches only;
/// pixels are clamped to [0, 1]. Small images are integer-upscaled.
pub fn image_grid(batch: &ImageBatch, cols: usize, path: &Path) -> Result<()> {
    let (n, c, h, w) = {
        let s = batch.shape();
        (s[0], s[1], s[2], s[3])
    };
    if n == 0 || cols == 0 {
        return Err(Error::argument("image grid needs images and columns"));
    }
    if c != 1 && c != 3 {
        return Err(Error::argument(format!("image grid supports 1 or 3 channels, got {c}")));
    }
    let scale = (48 / h.max(w).max(1)).max(1);
    let (ch, cw) = (h * scale, w * scale);
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    const GAP: usize = 2;
    let mut cv = Canvas::new(
        (cols * cw + (cols + 1) * GAP) as u32,
        (rows * ch + (rows + 1) * GAP) as u32,
    );
    cv.fill_rect(0, 0, cv.width() - 1, cv.height() - 1, [90, 90, 90]);
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        let oy = (GAP + gr * (ch + GAP)) as i64;
        let ox = (GAP + gc * (cw + GAP)) as i64;
        for y in 0..ch {
            for x in 0..cw {
                let (sy, sx) = (y / scale, x / scale);
                let px = |ch_i: usize| {
                    (batch[[i, ch_i, sy, sx]].clamp(0.0, 1.0) * 255.0).round() as u8
                };
                let col = if c == 1 {
                    let g = px(0);
                    [g, g, g]
                } else {
                    [px(0), px(1), px(2)]
                };
                cv.put(ox + x as i64, oy + y as i64, col);
            }
        }
    }
    cv.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn text_marks_pixels() {
        let mut cv = Canvas::new(64, 16);
        cv.text(2, 2, "A?", FG);
        let dark = cv.img.pixels().filter(|p| p.0 == FG).count();
        assert!(dark > 10, "glyphs drew {dark} pixels");
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(0.5), "0.5");
        assert_eq!(fmt_tick(1.0), "1");
        assert_eq!(fmt_tick(0.125), "0.125");
        assert_eq!(fmt_tick(1e-4), "1.0e-4");
        assert_eq!(fmt_tick(-2.0), "-2");
    }

    #[test]
    fn line_chart_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let series = [
            Series { label: "a".into(), points: vec![(0.0, 0.1), (1.0, 0.9), (2.0, 0.4)] },
            Series { label: "b".into(), points: vec![(0.0, 0.8), (2.0, 0.2)] },
        ];
        let p1 = dir.path().join("one.png");
        let p2 = dir.path().join("two.png");
        line_chart("t", "x", "y", &series, &p1).unwrap();
        line_chart("t", "x", "y", &series, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert!(!b1.is_empty());
        assert_eq!(b1, std::fs::read(&p2).unwrap());
    }

    #[test]
    fn degenerate_ranges_still_render() {
        let dir = tempfile::tempdir().unwrap();
        let series = [Series { label: "flat".into(), points: vec![(0.0, 1.0), (1.0, 1.0)] }];
        line_chart("t", "x", "y", &series, &dir.path().join("flat.png")).unwrap();
        let one = [Series { label: "dot".into(), points: vec![(0.5, 0.5)] }];
        line_chart("t", "x", "y", &one, &dir.path().join("dot.png")).unwrap();
    }

    #[test]
    fn histogram_handles_uneven_sides() {
        let dir = tempfile::tempdir().unwrap();
        let a: Vec<f64> = (0..40).map(|i| i as f64 / 10.0).collect();
        let b = vec![5.0; 7];
        histogram_pair("t", "score", ("in", &a), ("out", &b), 16, &dir.path().join("h.png"))
            .unwrap();
        assert!(histogram_pair("t", "x", ("in", &a), ("out", &[]), 16, &dir.path().join("e.png"))
            .is_err());
    }

    #[test]
    fn image_grid_tiles_and_upscales() {
        let dir = tempfile::tempdir().unwrap();
        let batch = Array4::from_shape_fn((5, 1, 4, 4), |(i, _, y, x)| {
            (i + y + x) as f64 / 12.0
        });
        let path = dir.path().join("g.png");
        image_grid(&batch, 3, &path).unwrap();
        let img = image::open(&path).unwrap();
        // 3 columns, 2 rows of 4x4 cells upscaled 12x, 2px gaps.
        assert_eq!(img.width(), (3 * 48 + 4 * 2) as u32);
        assert_eq!(img.height(), (2 * 48 + 3 * 2) as u32);

        let rgb = Array4::from_elem((2, 3, 8, 8), 0.5);
        image_grid(&rgb, 8, &dir.path().join("rgb.png")).unwrap();
        let two_ch = Array4::from_elem((2, 2, 8, 8), 0.5);
        assert!(image_grid(&two_ch, 2, &dir.path().join("bad.png")).is_err());
    }
}
