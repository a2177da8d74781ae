//! Small PNG rendering helpers for similarity heat maps and transfer-matrix
//! plots. Labels live in the accompanying text/JSON outputs; these images
//! are color-mapped data only.

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::Result;
use crate::eval::TransferMatrix;

/// Viridis-like colormap over `[0, 1]`, linearly interpolated anchors.
fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.229, 0.322, 0.546],
        [0.127, 0.566, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let t = v - i as f64;
    let mix = |a: f64, b: f64| ((a + (b - a) * t) * 255.0).round() as u8;
    Rgb([
        mix(STOPS[i][0], STOPS[i + 1][0]),
        mix(STOPS[i][1], STOPS[i + 1][1]),
        mix(STOPS[i][2], STOPS[i + 1][2]),
    ])
}

/// Renders a scalar map with values mapped from `[lo, hi]` onto the
/// colormap, each cell drawn as a `scale`×`scale` block (nearest neighbor).
pub fn render_heatmap(values: &Array2<f64>, lo: f64, hi: f64, scale: usize) -> RgbImage {
    let (h, w) = values.dim();
    let span = (hi - lo).max(1e-12);
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for (y, x, pixel) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        let (r, c) = (y as usize / scale, x as usize / scale);
        *pixel = colormap((values[(r, c)] - lo) / span);
    }
    img
}

/// Two panels side by side with a thin separator.
pub fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    let gap = 4u32;
    let height = left.height().max(right.height());
    let width = left.width() + gap + right.width();
    let mut out = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (x, y, p) in left.enumerate_pixels() {
        out.put_pixel(x, y, *p);
    }
    for (x, y, p) in right.enumerate_pixels() {
        out.put_pixel(left.width() + gap + x, y, *p);
    }
    out
}

/// Heatmap of a transfer matrix: one row per matrix row (clean first), one
/// column per model, color = mIoU (viridis, 0..1). The lowest attack mIoU
/// per column is outlined in white.
pub fn render_matrix_plot(matrix: &TransferMatrix) -> RgbImage {
    const CELL_W: u32 = 64;
    const CELL_H: u32 = 36;
    const BORDER: u32 = 2;
    let rows = matrix.rows.len() as u32;
    let cols = matrix.columns.len() as u32;
    let mut img = RgbImage::from_pixel(cols * CELL_W, rows * CELL_H, Rgb([30, 30, 30]));

    let mut minima = vec![f64::INFINITY; matrix.columns.len()];
    for row in &matrix.rows {
        if row.source.is_none() {
            continue;
        }
        for (i, cell) in row.cells.iter().enumerate() {
            if let Some(m) = cell.miou {
                minima[i] = minima[i].min(m);
            }
        }
    }

    for (ri, row) in matrix.rows.iter().enumerate() {
        for (ci, cell) in row.cells.iter().enumerate() {
            let color = match cell.miou {
                Some(m) => colormap(m),
                None => Rgb([90, 90, 90]),
            };
            let is_min = row.source.is_some()
                && cell
                    .miou
                    .map(|m| (m - minima[ci]).abs() < 1e-12)
                    .unwrap_or(false);
            let x0 = ci as u32 * CELL_W;
            let y0 = ri as u32 * CELL_H;
            for dy in 0..CELL_H {
                for dx in 0..CELL_W {
                    let edge = dy < BORDER || dx < BORDER || dy >= CELL_H - BORDER || dx >= CELL_W - BORDER;
                    let p = if edge {
                        if is_min {
                            Rgb([255, 255, 255])
                        } else {
                            Rgb([30, 30, 30])
                        }
                    } else {
                        color
                    };
                    img.put_pixel(x0 + dx, y0 + dy, p);
                }
            }
        }
    }
    img
}

pub fn save_png(path: &std::path::Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}
