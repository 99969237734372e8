//! Minimal raster scatter plots (PNG), used by the latent-space command.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

const SIZE: u32 = 800;
const MARGIN: u32 = 40;
const POINT_RADIUS: i32 = 3;

/// Ten visually distinct colors for categorical labels.
const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// How point colors are derived from the color column.
pub enum ColorSpec {
    /// small set of integer categories
    Categorical(Vec<usize>),
    /// real values mapped through a blue-yellow-red ramp
    Continuous(Vec<f64>),
}

fn ramp(t: f64) -> [u8; 3] {
    // blue -> yellow -> red
    let t = t.clamp(0.0, 1.0);
    let (a, b, s) = if t < 0.5 {
        ([40.0, 60.0, 200.0], [240.0, 220.0, 60.0], t * 2.0)
    } else {
        ([240.0, 220.0, 60.0], [200.0, 40.0, 40.0], (t - 0.5) * 2.0)
    };
    [
        (a[0] + (b[0] - a[0]) * s) as u8,
        (a[1] + (b[1] - a[1]) * s) as u8,
        (a[2] + (b[2] - a[2]) * s) as u8,
    ]
}

fn draw_disc(img: &mut RgbImage, cx: i32, cy: i32, color: Rgb<u8>) {
    for dy in -POINT_RADIUS..=POINT_RADIUS {
        for dx in -POINT_RADIUS..=POINT_RADIUS {
            if dx * dx + dy * dy <= POINT_RADIUS * POINT_RADIUS {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < SIZE && (y as u32) < SIZE {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}

/// Render an N x 2 point cloud to a PNG. Deterministic for fixed inputs.
pub fn scatter(points: &Array2<f64>, colors: &ColorSpec, out: &Path) -> std::io::Result<()> {
    assert_eq!(points.ncols(), 2, "scatter expects 2-D points");
    let n = points.nrows();
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));

    // axes box
    let frame = Rgb([180, 180, 180]);
    for x in MARGIN..SIZE - MARGIN {
        img.put_pixel(x, MARGIN, frame);
        img.put_pixel(x, SIZE - MARGIN, frame);
    }
    for y in MARGIN..SIZE - MARGIN {
        img.put_pixel(MARGIN, y, frame);
        img.put_pixel(SIZE - MARGIN, y, frame);
    }

    if n > 0 {
        let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            x_lo = x_lo.min(points[(i, 0)]);
            x_hi = x_hi.max(points[(i, 0)]);
            y_lo = y_lo.min(points[(i, 1)]);
            y_hi = y_hi.max(points[(i, 1)]);
        }
        let pad = |lo: f64, hi: f64| {
            if hi - lo < 1e-12 {
                (lo - 1.0, hi + 1.0)
            } else {
                (lo, hi)
            }
        };
        let (x_lo, x_hi) = pad(x_lo, x_hi);
        let (y_lo, y_hi) = pad(y_lo, y_hi);
        let span = (SIZE - 2 * MARGIN) as f64;

        let (c_lo, c_hi) = match colors {
            ColorSpec::Continuous(v) => {
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo < 1e-12 {
                    (lo - 1.0, hi + 1.0)
                } else {
                    (lo, hi)
                }
            }
            _ => (0.0, 1.0),
        };

        for i in 0..n {
            let px = MARGIN as f64 + (points[(i, 0)] - x_lo) / (x_hi - x_lo) * span;
            // image y grows downward
            let py = MARGIN as f64 + (1.0 - (points[(i, 1)] - y_lo) / (y_hi - y_lo)) * span;
            let color = match colors {
                ColorSpec::Categorical(c) => Rgb(PALETTE[c[i] % PALETTE.len()]),
                ColorSpec::Continuous(v) => Rgb(ramp((v[i] - c_lo) / (c_hi - c_lo))),
            };
            draw_disc(&mut img, px as i32, py as i32, color);
        }
    }
    img.save(out)
        .map_err(|e| std::io::Error::other(e.to_string()))
}
