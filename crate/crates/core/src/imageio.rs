//! Image loading/saving ([0,1] float RGB tensors) and overlay rendering.

use crate::error::{Result, SamError};
use crate::pipeline::MatchRecord;
use crate::tensor::DenseArray;
use image::{DynamicImage, ImageBuffer, Rgb};
use std::path::Path;

/// Loads PNG/PGM/PPM into `[H, W, 3]` with values in `[0, 1]`; grayscale
/// inputs are replicated across channels.
pub fn load_image(path: &Path) -> Result<DenseArray<f32>> {
    let img = image::open(path).map_err(|e| SamError::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for px in rgb.pixels() {
        for ch in 0..3 {
            data.push(px[ch] as f32 / 255.0);
        }
    }
    DenseArray::new(vec![h, w, 3], data)
}

fn to_rgb8(img: &DenseArray<f32>) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(SamError::ShapeMismatch(format!(
            "expected [H, W, 3] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut buf = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([
                (img.at3(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.at3(y, x, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.at3(y, x, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(buf)
}

/// Saves an `[H, W, 3]` float image; format follows the file extension
/// (png, pgm, ppm).
pub fn save_image(path: &Path, img: &DenseArray<f32>) -> Result<()> {
    let buf = to_rgb8(img)?;
    let dynimg = DynamicImage::ImageRgb8(buf);
    let is_pgm = path
        .extension()
        .map_or(false, |e| e.eq_ignore_ascii_case("pgm"));
    let out = if is_pgm {
        DynamicImage::ImageLuma8(dynimg.to_luma8())
    } else {
        dynimg
    };
    out.save(path)
        .map_err(|e| SamError::Image(format!("{}: {e}", path.display())))
}

/// Renders a scalar map as a grayscale image normalized to the full
/// [0,255] range (constant maps render mid-gray).
pub fn save_gray_map(path: &Path, map: &DenseArray<f64>) -> Result<()> {
    let (h, w) = (map.rows(), map.cols());
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut data = Vec::with_capacity(h * w * 3);
    for &v in map.data() {
        let g = if span > 1e-12 { ((v - min) / span) as f32 } else { 0.5 };
        data.extend([g, g, g]);
    }
    save_image(path, &DenseArray::new(vec![h, w, 3], data)?)
}

/// Bresenham line in place; endpoints are clamped to the image.
pub fn draw_line(
    img: &mut DenseArray<f32>,
    from: (f64, f64),
    to: (f64, f64),
    color: [f32; 3],
) {
    let (h, w) = (img.shape()[0] as i64, img.shape()[1] as i64);
    let clamp = |p: (f64, f64)| {
        (
            (p.0.round() as i64).clamp(0, w - 1),
            (p.1.round() as i64).clamp(0, h - 1),
        )
    };
    let (mut x0, mut y0) = clamp(from);
    let (x1, y1) = clamp(to);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        let base = ((y0 * w + x0) * 3) as usize;
        img.data_mut()[base..base + 3].copy_from_slice(&color);
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

pub const OVERLAY_GREEN: [f32; 3] = [0.0, 0.9, 0.0];
pub const OVERLAY_RED: [f32; 3] = [0.9, 0.0, 0.0];

/// Draws one query→prediction line per record on a copy of the source
/// image; green when the prediction is within `eta` of the ground truth,
/// red otherwise (or when no ground truth is given).
pub fn render_overlay(
    img_s: &DenseArray<f32>,
    records: &[MatchRecord],
    ground_truth: &[Option<(f64, f64)>],
    eta: f64,
) -> Result<DenseArray<f32>> {
    if records.len() != ground_truth.len() {
        return Err(SamError::ShapeMismatch(format!(
            "{} records vs {} ground-truth entries",
            records.len(),
            ground_truth.len()
        )));
    }
    let mut out = img_s.clone();
    for (rec, gt) in records.iter().zip(ground_truth) {
        let correct = gt.map_or(false, |(gx, gy)| {
            let d = ((rec.refined.0 - gx).powi(2) + (rec.refined.1 - gy).powi(2)).sqrt();
            d < eta
        });
        let color = if correct { OVERLAY_GREEN } else { OVERLAY_RED };
        draw_line(
            &mut out,
            (rec.query.0 as f64, rec.query.1 as f64),
            rec.refined,
            color,
        );
    }
    Ok(out)
}
