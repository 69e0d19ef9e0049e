//! Minimal PNG line chart of mIoU against the number of learned classes.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;

pub struct Series {
    pub name: String,
    pub color: [u8; 3],
    /// `(learned class count, mIoU in [0, 1])`; `None` values break the line.
    pub points: Vec<(f64, Option<f64>)>,
}

pub const GROUP_COLORS: [[u8; 3]; 3] = [[214, 39, 40], [31, 119, 180], [44, 160, 44]];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: i64) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for ox in 0..thick {
            for oy in 0..thick {
                put(img, x + ox, y + oy, c);
            }
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

/// Render the series on a white canvas with a 10%-step horizontal grid.
/// The y axis spans [0, 1]; the x axis spans the observed class counts.
pub fn render_miou_chart(series: &[Series], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (left, right) = (MARGIN, WIDTH as i64 - MARGIN);
    let (top, bottom) = (MARGIN, HEIGHT as i64 - MARGIN);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let to_px = |x: f64, y: f64| {
        let px = left + ((x - xmin) / span * (right - left) as f64).round() as i64;
        let py = bottom - (y.clamp(0.0, 1.0) * (bottom - top) as f64).round() as i64;
        (px, py)
    };

    let grid = Rgb([225, 225, 225]);
    for i in 0..=10 {
        let y = bottom - (i * (bottom - top)) / 10;
        line(&mut img, (left, y), (right, y), grid, 1);
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (left, top), (left, bottom), axis, 1);
    line(&mut img, (left, bottom), (right, bottom), axis, 1);

    for s in series {
        let c = Rgb(s.color);
        let mut prev = None;
        for &(x, y) in &s.points {
            match y {
                Some(y) => {
                    let p = to_px(x, y);
                    if let Some(q) = prev {
                        line(&mut img, q, p, c, 2);
                    }
                    for ox in -3..=3 {
                        for oy in -3..=3 {
                            put(&mut img, p.0 + ox, p.1 + oy, c);
                        }
                    }
                    prev = Some(p);
                }
                None => prev = None,
            }
        }
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
