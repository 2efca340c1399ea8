//! Minimal chart rasterizer: histograms, bar charts, and scatter plots
//! rendered straight into PNG buffers with a built-in 5x7 glyph set, so
//! report emission has no font or plotting dependencies.

use image::{Rgb, RgbImage};

const BG: Rgb<u8> = Rgb([252, 252, 250]);
const INK: Rgb<u8> = Rgb([40, 40, 48]);
const GRID: Rgb<u8> = Rgb([220, 220, 224]);
const SERIES: [Rgb<u8>; 5] = [
    Rgb([66, 120, 200]),
    Rgb([214, 120, 60]),
    Rgb([90, 160, 90]),
    Rgb([170, 90, 170]),
    Rgb([120, 120, 120]),
];

/// 5x7 glyphs, one bit per pixel, rows top to bottom.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ' ' => [0; 7],
        _ => [0x00, 0x0A, 0x15, 0x11, 0x15, 0x0A, 0x00], // unknown marker
    }
}

pub struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(w: u32, h: u32) -> Self {
        let mut img = RgbImage::new(w, h);
        for p in img.pixels_mut() {
            *p = BG;
        }
        Self { img }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        let mut cx = x;
        for ch in s.chars() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (1 << (4 - col)) != 0 {
                        self.put(cx + col as i64, y + row as i64, c);
                    }
                }
            }
            cx += 6;
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    pub fn save(&self, path: &std::path::Path) -> anyhow::Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

struct Frame {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn px(&self, x: f64) -> i64 {
        let t = (x - self.xmin) / (self.xmax - self.xmin).max(1e-12);
        self.x0 + (t * (self.x1 - self.x0) as f64).round() as i64
    }
    fn py(&self, y: f64) -> i64 {
        let t = (y - self.ymin) / (self.ymax - self.ymin).max(1e-12);
        self.y1 - (t * (self.y1 - self.y0) as f64).round() as i64
    }
}

fn draw_frame(c: &mut Canvas, title: &str, f: &Frame) {
    c.text(f.x0, f.y0 - 16, title, INK);
    c.line(f.x0, f.y1, f.x1, f.y1, INK);
    c.line(f.x0, f.y0, f.x0, f.y1, INK);
    for i in 0..=4 {
        let xv = f.xmin + (f.xmax - f.xmin) * i as f64 / 4.0;
        let yv = f.ymin + (f.ymax - f.ymin) * i as f64 / 4.0;
        let px = f.px(xv);
        let py = f.py(yv);
        c.line(px, f.y1, px, f.y1 + 3, INK);
        c.text(px - 12, f.y1 + 6, &format!("{xv:.2}"), INK);
        c.line(f.x0 - 3, py, f.x0, py, INK);
        c.text(f.x0 - 38, py - 3, &format!("{yv:.2}"), INK);
        if i > 0 {
            c.line(f.x0 + 1, py, f.x1, py, GRID);
        }
    }
}

/// Histogram of values over a fixed number of bins.
pub fn histogram(path: &std::path::Path, title: &str, values: &[f64], bins: usize) -> anyhow::Result<()> {
    let mut c = Canvas::new(480, 320);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || lo == hi {
        lo = lo.min(0.0);
        hi = hi.max(lo + 1.0);
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        let t = (v - lo) / (hi - lo);
        let b = ((t * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let peak = *counts.iter().max().unwrap_or(&1) as f64;
    let f = Frame { x0: 52, y0: 28, x1: 460, y1: 280, xmin: lo, xmax: hi, ymin: 0.0, ymax: peak };
    draw_frame(&mut c, title, &f);
    for (b, &cnt) in counts.iter().enumerate() {
        let xa = f.px(lo + (hi - lo) * b as f64 / bins as f64);
        let xb = f.px(lo + (hi - lo) * (b + 1) as f64 / bins as f64);
        let y = f.py(cnt as f64);
        if cnt > 0 {
            c.fill_rect(xa + 1, y, xb - 1, f.y1 - 1, SERIES[0]);
        }
    }
    c.save(path)
}

/// Grouped bar chart: one bar per label.
pub fn bar_chart(
    path: &std::path::Path,
    title: &str,
    labels: &[String],
    values: &[f64],
    groups: &[usize],
) -> anyhow::Result<()> {
    let mut c = Canvas::new((80 + labels.len() * 46).max(320) as u32, 320);
    let hi = values.iter().copied().fold(0.0f64, f64::max).max(1e-9);
    let f = Frame {
        x0: 52,
        y0: 28,
        x1: 60 + (labels.len() as i64) * 46,
        y1: 260,
        xmin: 0.0,
        xmax: labels.len() as f64,
        ymin: 0.0,
        ymax: hi * 1.1,
    };
    c.text(f.x0, f.y0 - 16, title, INK);
    c.line(f.x0, f.y1, f.x1, f.y1, INK);
    c.line(f.x0, f.y0, f.x0, f.y1, INK);
    for i in 0..=4 {
        let yv = f.ymax * i as f64 / 4.0;
        let py = f.py(yv);
        c.line(f.x0 - 3, py, f.x0, py, INK);
        c.text(f.x0 - 40, py - 3, &format!("{yv:.2}"), INK);
    }
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let xa = f.x0 + 8 + (i as i64) * 46;
        let color = SERIES[groups.get(i).copied().unwrap_or(0) % SERIES.len()];
        c.fill_rect(xa, f.py(v), xa + 30, f.y1 - 1, color);
        c.text(xa - 2, f.y1 + 8 + (i % 2) as i64 * 10, label, INK);
    }
    c.save(path)
}

/// Labeled scatter plot.
pub fn scatter(
    path: &std::path::Path,
    title: &str,
    points: &[(f64, f64, String)],
) -> anyhow::Result<()> {
    let mut c = Canvas::new(480, 320);
    let (mut xlo, mut xhi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y, _) in points {
        xlo = xlo.min(*x);
        xhi = xhi.max(*x);
        ylo = ylo.min(*y);
        yhi = yhi.max(*y);
    }
    if !xlo.is_finite() {
        xlo = 0.0;
        xhi = 1.0;
        ylo = 0.0;
        yhi = 1.0;
    }
    let xpad = ((xhi - xlo) * 0.1).max(1e-3);
    let ypad = ((yhi - ylo) * 0.1).max(1e-3);
    let f = Frame {
        x0: 52,
        y0: 28,
        x1: 460,
        y1: 280,
        xmin: xlo - xpad,
        xmax: xhi + xpad,
        ymin: ylo - ypad,
        ymax: yhi + ypad,
    };
    draw_frame(&mut c, title, &f);
    for (i, (x, y, label)) in points.iter().enumerate() {
        let px = f.px(*x);
        let py = f.py(*y);
        let color = SERIES[i % SERIES.len()];
        c.fill_rect(px - 2, py - 2, px + 2, py + 2, color);
        c.text(px + 5, py - 3, label, INK);
    }
    c.save(path)
}

/// Simple line plot of (step, value) pairs.
pub fn line_plot(path: &std::path::Path, title: &str, points: &[(f64, f64)]) -> anyhow::Result<()> {
    let mut c = Canvas::new(480, 320);
    let (mut xhi, mut yhi, mut ylo) = (1e-9f64, f64::NEG_INFINITY, f64::INFINITY);
    for (x, y) in points {
        xhi = xhi.max(*x);
        yhi = yhi.max(*y);
        ylo = ylo.min(*y);
    }
    if !yhi.is_finite() {
        yhi = 1.0;
        ylo = 0.0;
    }
    let f = Frame {
        x0: 52,
        y0: 28,
        x1: 460,
        y1: 280,
        xmin: 0.0,
        xmax: xhi,
        ymin: (ylo * 0.9).min(0.0),
        ymax: yhi * 1.05,
    };
    draw_frame(&mut c, title, &f);
    for pair in points.windows(2) {
        c.line(
            f.px(pair[0].0),
            f.py(pair[0].1),
            f.px(pair[1].0),
            f.py(pair[1].1),
            SERIES[0],
        );
    }
    c.save(path)
}
