//! Dependency-free PNG plots: line charts for loss/PSNR curves and bar
//! charts for the layout comparison. Labels use a built-in 3x5 digit font.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 560;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 48;

const SERIES_COLORS: [[u8; 3]; 4] = [[204, 41, 54], [38, 84, 124], [32, 140, 88], [180, 120, 30]];

fn glyph(ch: char) -> [u8; 5] {
    // Each byte is one row of 3 pixels, most significant bit left.
    match ch {
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
        'e' => [0b000, 0b111, 0b110, 0b100, 0b111],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..3 {
                if row & (0b100 >> rx) != 0 {
                    let (px, py) = (cx + rx, y + ry as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb(color));
                    }
                }
            }
        }
        cx += 4;
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) as u32).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).round() as i64;
        let y = (a.1 + (b.1 - a.1) * t).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn frame(img: &mut RgbImage, x_range: (f64, f64), y_range: (f64, f64)) {
    let axis = [60u8, 60, 60];
    let (w, h) = (img.width(), img.height());
    draw_line(
        img,
        (MARGIN as f64, (h - MARGIN) as f64),
        ((w - MARGIN / 2) as f64, (h - MARGIN) as f64),
        axis,
    );
    draw_line(
        img,
        (MARGIN as f64, (h - MARGIN) as f64),
        (MARGIN as f64, (MARGIN / 2) as f64),
        axis,
    );
    draw_text(img, &fmt_tick(x_range.0), MARGIN, h - MARGIN + 6, axis);
    let x_max = fmt_tick(x_range.1);
    draw_text(
        img,
        &x_max,
        w - MARGIN / 2 - 4 * x_max.len() as u32,
        h - MARGIN + 6,
        axis,
    );
    draw_text(img, &fmt_tick(y_range.1), 4, MARGIN / 2, axis);
    draw_text(img, &fmt_tick(y_range.0), 4, h - MARGIN - 6, axis);
}

/// Line plot of one or more `(x, y)` series.
pub fn line_plot(series: &[(&str, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::InvalidConfig("nothing to plot".into()));
    }
    let all = series.iter().flat_map(|(_, pts)| pts.iter());
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([250, 250, 248]));
    frame(&mut img, (x_min, x_max), (y_min, y_max));
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let fx = (x - x_min) / (x_max - x_min);
        let fy = (y - y_min) / (y_max - y_min);
        (
            MARGIN as f64 + fx * (WIDTH - MARGIN - MARGIN / 2) as f64,
            (HEIGHT - MARGIN) as f64 - fy * (HEIGHT - MARGIN - MARGIN / 2) as f64,
        )
    };
    for (s, (_, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[s % SERIES_COLORS.len()];
        for pair in pts.windows(2) {
            draw_line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), color);
        }
        if pts.len() == 1 {
            let (x, y) = to_px(pts[0].0, pts[0].1);
            draw_line(&mut img, (x - 2.0, y), (x + 2.0, y), color);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Bar chart with one labeled bar per value.
pub fn bar_chart(bars: &[(&str, f64)], path: &Path) -> Result<()> {
    if bars.is_empty() {
        return Err(Error::InvalidConfig("nothing to plot".into()));
    }
    let y_max = bars.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let y_max = if y_max <= 0.0 { 1.0 } else { y_max };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([250, 250, 248]));
    frame(&mut img, (0.0, bars.len() as f64), (0.0, y_max));

    let plot_w = (WIDTH - MARGIN - MARGIN / 2) as f64;
    let plot_h = (HEIGHT - MARGIN - MARGIN / 2) as f64;
    let slot = plot_w / bars.len() as f64;
    for (i, (label, value)) in bars.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let bar_w = slot * 0.6;
        let x0 = MARGIN as f64 + i as f64 * slot + slot * 0.2;
        let height = (value / y_max).clamp(0.0, 1.0) * plot_h;
        let y0 = (HEIGHT - MARGIN) as f64 - height;
        for x in x0 as u32..(x0 + bar_w) as u32 {
            draw_line(&mut img, (x as f64, y0), (x as f64, (HEIGHT - MARGIN) as f64), color);
        }
        draw_text(
            &mut img,
            &fmt_tick(*value),
            x0 as u32,
            (y0 - 10.0).max(2.0) as u32,
            [60, 60, 60],
        );
        // Labels render digits only; bar order and the CSV carry the names.
        let _ = label;
    }
    img.save(path)?;
    Ok(())
}
