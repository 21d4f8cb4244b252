//! Loss-curve rendering: one panel per loss component over iterations,
//! written as a PNG. Rendering is fully deterministic for fixed inputs.

use std::path::Path;

use hsd_core::{Error, Result};
use image::{Rgb, RgbImage};

pub struct LossSeries {
    pub name: String,
    /// Rows as (iteration, fcl, fdl, frl, hkd, total).
    pub rows: Vec<[f64; 6]>,
}

pub const COMPONENTS: [&str; 5] = ["fcl", "fdl", "frl", "hkd", "total"];

/// Parses a loss CSV, verifying the schema and rejecting empty files.
pub fn parse_loss_csv(path: &Path) -> Result<LossSeries> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?
        .clone();
    let mut missing = Vec::new();
    let mut index = [0usize; 6];
    for (i, want) in ["iteration", "fcl", "fdl", "frl", "hkd", "total"].iter().enumerate() {
        match headers.iter().position(|h| h == *want) {
            Some(pos) => index[i] = pos,
            None => missing.push(*want),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "{}: missing columns: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let mut row = [0.0f64; 6];
        for (i, &pos) in index.iter().enumerate() {
            row[i] = record
                .get(pos)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| {
                    Error::Validation(format!("{}: non-numeric field in row", path.display()))
                })?;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!("{}: empty CSV", path.display())));
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(LossSeries { name, rows })
}

const SERIES_COLORS: [Rgb<u8>; 2] = [Rgb([31, 119, 180]), Rgb([214, 39, 40])];
const AXIS: Rgb<u8> = Rgb([70, 70, 70]);
const BG: Rgb<u8> = Rgb([255, 255, 255]);

/// Renders stacked panels (one per component), overlaying every series.
pub fn render_loss_plot(series: &[LossSeries], out: &Path) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Validation("no loss series to plot".into()));
    }
    let (panel_w, panel_h, margin_l, margin_r, gap, top, bottom) = (560, 110, 56, 12, 16, 16, 20);
    let width = (margin_l + panel_w + margin_r) as u32;
    let height = (top + COMPONENTS.len() * (panel_h + gap) + bottom) as u32;
    let mut img = RgbImage::from_pixel(width, height, BG);

    let max_iter = series
        .iter()
        .flat_map(|s| s.rows.iter().map(|r| r[0]))
        .fold(1.0f64, f64::max);

    for (ci, comp) in COMPONENTS.iter().enumerate() {
        let y0 = top + ci * (panel_h + gap);
        let col = ci + 1; // row layout: [iteration, fcl, fdl, frl, hkd, total]
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in series {
            for r in &s.rows {
                lo = lo.min(r[col]);
                hi = hi.max(r[col]);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if (hi - lo).abs() < 1e-12 {
            hi = lo + 1.0;
        }

        // Frame.
        for x in margin_l..margin_l + panel_w {
            img.put_pixel(x as u32, (y0 + panel_h) as u32, AXIS);
        }
        for y in y0..y0 + panel_h {
            img.put_pixel(margin_l as u32, y as u32, AXIS);
        }

        for (si, s) in series.iter().enumerate() {
            let color = SERIES_COLORS[si % SERIES_COLORS.len()];
            let mut prev: Option<(i64, i64)> = None;
            for r in &s.rows {
                let x = margin_l as f64 + r[0] / max_iter * (panel_w - 1) as f64;
                let t = (r[col] - lo) / (hi - lo);
                let y = (y0 + panel_h - 1) as f64 - t * (panel_h - 2) as f64;
                let p = (x as i64, y as i64);
                if let Some(q) = prev {
                    draw_line(&mut img, q, p, color);
                }
                prev = Some(p);
            }
        }

        draw_text(&mut img, margin_l + 4, y0 + 2, comp, AXIS);
        draw_text(&mut img, 2, y0 + 2, &format_short(hi), AXIS);
        draw_text(&mut img, 2, y0 + panel_h - 6, &format_short(lo), AXIS);
    }

    // Legend: series name in its color.
    let mut lx = margin_l;
    let ly = top + COMPONENTS.len() * (panel_h + gap) + 4;
    for (si, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        draw_text(&mut img, lx, ly, &s.name, color);
        lx += (s.name.len() + 3) * 4;
    }

    img.save(out).map_err(|e| Error::Validation(format!("{}: {e}", out.display())))?;
    Ok(())
}

fn format_short(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 10_000.0 {
        format!("{v:.3}")
    } else {
        format!("{v:.1e}")
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    // Bresenham.
    let (mut x, mut y) = (x0, y0);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
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

/// 3x5 bitmap font (digits, lowercase, and a little punctuation).
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        'a' => [0b000, 0b111, 0b011, 0b101, 0b111],
        'b' => [0b100, 0b111, 0b101, 0b101, 0b111],
        'c' => [0b000, 0b111, 0b100, 0b100, 0b111],
        'd' => [0b001, 0b111, 0b101, 0b101, 0b111],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        'f' => [0b011, 0b010, 0b111, 0b010, 0b010],
        'g' => [0b111, 0b101, 0b111, 0b001, 0b111],
        'h' => [0b100, 0b111, 0b101, 0b101, 0b101],
        'i' => [0b010, 0b000, 0b010, 0b010, 0b010],
        'j' => [0b001, 0b000, 0b001, 0b101, 0b111],
        'k' => [0b100, 0b101, 0b110, 0b110, 0b101],
        'l' => [0b010, 0b010, 0b010, 0b010, 0b011],
        'm' => [0b000, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b000, 0b110, 0b101, 0b101, 0b101],
        'o' => [0b000, 0b111, 0b101, 0b101, 0b111],
        'p' => [0b000, 0b111, 0b101, 0b111, 0b100],
        'q' => [0b000, 0b111, 0b101, 0b111, 0b001],
        'r' => [0b000, 0b011, 0b100, 0b100, 0b100],
        's' => [0b000, 0b011, 0b110, 0b001, 0b110],
        't' => [0b010, 0b111, 0b010, 0b010, 0b011],
        'u' => [0b000, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b000, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b000, 0b101, 0b101, 0b111, 0b111],
        'x' => [0b000, 0b101, 0b010, 0b010, 0b101],
        'y' => [0b000, 0b101, 0b111, 0b001, 0b111],
        'z' => [0b000, 0b111, 0b011, 0b110, 0b111],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x: usize, y: usize, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c.to_ascii_lowercase());
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    let (px, py) = ((cx + col) as u32, (y + row) as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, color);
                    }
                }
            }
        }
        cx += 4;
    }
}
