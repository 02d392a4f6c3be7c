//! Minimal chart rasteriser: axes, a 5×7 bitmap font, line and grouped-bar charts.

use std::path::Path;

use anyhow::Result;
use coarse2fine::imaging::Image;

const GLYPH_W: usize = 5;

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
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
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
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        _ => [0; 7],
    }
}

pub const PALETTE: [[f32; 3]; 6] = [[0.12, 0.47, 0.71], [0.89, 0.1, 0.11], [0.2, 0.63, 0.17], [1.0, 0.5, 0.0], [0.42, 0.24, 0.6], [0.5, 0.5, 0.5]];

pub struct Canvas {
    pub img: Image,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            img: Image::filled(height, width, 3, 1.0),
        }
    }

    pub fn pixel(&mut self, x: i64, y: i64, c: [f32; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.img.width && (y as usize) < self.img.height {
            for (k, v) in c.iter().enumerate() {
                self.img.set(y as usize, x as usize, k, *v);
            }
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [f32; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.pixel(x, y, c);
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

    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [f32; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.pixel(x, y, c);
            }
        }
    }

    /// Text with its top-left corner at (x, y), `scale` pixels per font dot.
    pub fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: [f32; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            let ox = x + i as i64 * (GLYPH_W as i64 + 1) * scale;
            for (row, bits) in g.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        self.rect(ox + col as i64 * scale, y + row as i64 * scale, ox + (col as i64 + 1) * scale - 1, y + (row as i64 + 1) * scale - 1, c);
                    }
                }
            }
        }
    }

    pub fn text_width(s: &str, scale: i64) -> i64 {
        s.chars().count() as i64 * (GLYPH_W as i64 + 1) * scale
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.img.save_png(path, 1.0)?)
    }
}

const W: usize = 640;
const H: usize = 420;
const LEFT: i64 = 70;
const RIGHT: i64 = 170;
const TOP: i64 = 40;
const BOTTOM: i64 = 60;

/// Frame with a [0, 1] y axis; returns a mapping from unit y to pixel row.
fn axes(c: &mut Canvas, title: &str, x_label: &str, y_label: &str) -> impl Fn(f64) -> i64 {
    let black = [0.0; 3];
    let (x0, x1, y0, y1) = (LEFT, W as i64 - RIGHT, TOP, H as i64 - BOTTOM);
    c.text(LEFT, 12, title, 2, black);
    c.line((x0, y1), (x1, y1), black);
    c.line((x0, y0), (x0, y1), black);
    let ypix = move |v: f64| y1 - ((v.clamp(0.0, 1.0)) * (y1 - y0) as f64).round() as i64;
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = ypix(v);
        c.line((x0 - 4, y), (x0, y), black);
        c.line((x0 + 1, y), (x1, y), [0.9; 3]);
        let label = format!("{:.2}", v);
        c.text(x0 - 8 - Canvas::text_width(&label, 1), y - 3, &label, 1, black);
    }
    c.text((x0 + x1) / 2 - Canvas::text_width(x_label, 1) / 2, y1 + 36, x_label, 1, black);
    c.text(8, y0 - 14, y_label, 1, black);
    ypix
}

fn legend(c: &mut Canvas, names: &[String]) {
    let x = W as i64 - RIGHT + 12;
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10 + i as i64 * 16;
        c.rect(x, y, x + 10, y + 6, PALETTE[i % PALETTE.len()]);
        c.text(x + 16, y, n, 1, [0.0; 3]);
    }
}

/// One polyline per series over shared categorical x positions; y in [0, 1].
pub fn line_chart(path: &Path, title: &str, x_label: &str, x_ticks: &[String], series: &[(String, Vec<Option<f64>>)]) -> Result<()> {
    let mut c = Canvas::new(W, H);
    let ypix = axes(&mut c, title, x_label, "SUCCESS RATE");
    let n = x_ticks.len().max(1);
    let span = (W as i64 - RIGHT - LEFT - 40) as f64;
    let xpix = |i: usize| LEFT + 20 + if n == 1 { span as i64 / 2 } else { (i as f64 * span / (n - 1) as f64).round() as i64 };
    for (i, t) in x_ticks.iter().enumerate() {
        let x = xpix(i);
        c.line((x, H as i64 - BOTTOM), (x, H as i64 - BOTTOM + 4), [0.0; 3]);
        c.text(x - Canvas::text_width(t, 1) / 2, H as i64 - BOTTOM + 10, t, 1, [0.0; 3]);
    }
    for (s, (_, ys)) in series.iter().enumerate() {
        let col = PALETTE[s % PALETTE.len()];
        let pts: Vec<(i64, i64)> = ys.iter().enumerate().filter_map(|(i, v)| v.map(|v| (xpix(i), ypix(v)))).collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], col);
        }
        for p in &pts {
            c.rect(p.0 - 2, p.1 - 2, p.0 + 2, p.1 + 2, col);
        }
    }
    legend(&mut c, &series.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
    c.save(path)
}

/// Grouped bars: `values[g][s]` for group `g` and series `s`; y in [0, 1].
pub fn bar_chart(path: &Path, title: &str, x_label: &str, groups: &[String], series: &[String], values: &[Vec<Option<f64>>]) -> Result<()> {
    let mut c = Canvas::new(W, H);
    let ypix = axes(&mut c, title, x_label, "SUCCESS RATE");
    let g = groups.len().max(1) as i64;
    let width = W as i64 - RIGHT - LEFT;
    let slot = width / g;
    let bar = ((slot - 12) / series.len().max(1) as i64).max(2);
    for (gi, name) in groups.iter().enumerate() {
        let gx = LEFT + gi as i64 * slot + 6;
        for (si, v) in values.get(gi).map(|v| v.as_slice()).unwrap_or(&[]).iter().enumerate() {
            if let Some(v) = v {
                let x = gx + si as i64 * bar;
                c.rect(x, ypix(*v), x + bar - 2, ypix(0.0) - 1, PALETTE[si % PALETTE.len()]);
            }
        }
        let cx = gx + slot / 2 - 6;
        c.text(cx - Canvas::text_width(name, 1) / 2, H as i64 - BOTTOM + 10, name, 1, [0.0; 3]);
    }
    legend(&mut c, series);
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_lines_land_on_canvas() {
        let mut c = Canvas::new(40, 20);
        c.text(1, 1, "0", 1, [0.0; 3]);
        // the zero glyph's top row is .XXX.
        assert_eq!(c.img.get(1, 1, 0), 1.0);
        assert_eq!(c.img.get(1, 2, 0), 0.0);
        c.line((0, 19), (39, 19), [0.0; 3]);
        assert!((0..40).all(|x| c.img.get(19, x, 0) == 0.0));
        c.pixel(-1, 100, [0.0; 3]);
    }

    #[test]
    fn charts_write_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        line_chart(&p, "ROUND", "FRAMES", &["2000".into(), "5000".into()], &[("C2F".into(), vec![Some(0.5), Some(1.0)]), ("E2E".into(), vec![None, Some(0.1)])]).unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() > 100);
        let b = dir.path().join("b.png");
        bar_chart(&b, "T", "TOL", &["0.5".into()], &["RGB".into(), "DEPTH".into()], &[vec![Some(0.2), Some(0.9)]]).unwrap();
        assert!(std::fs::metadata(&b).unwrap().len() > 100);
    }
}
