//! Gaussian blur and bilinear resize.
//!
//! Blur is a separable convolution with a kernel truncated at radius
//! `ceil(3*sigma)` and normalized to sum 1; out-of-bounds taps clamp to the
//! nearest edge pixel. Resize samples with half-pixel-center alignment and
//! clamps source coordinates, so resizing to the same dimensions is the
//! identity.

use super::{ImageRaster, RasterError};
use crate::exec;

fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

fn clamp_index(i: i64, len: u32) -> usize {
    i.clamp(0, len as i64 - 1) as usize
}

pub fn gaussian_blur(img: &ImageRaster, sigma: f64) -> Result<ImageRaster, RasterError> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(RasterError::InvalidParameter(format!("blur sigma must be positive, got {sigma}")));
    }
    let weights = kernel(sigma);
    let radius = (weights.len() / 2) as i64;
    let (w, h) = (img.width(), img.height());
    let (wu, hu) = (w as usize, h as usize);
    let src = img.as_bytes();
    let row_len = wu * 3;

    // Horizontal pass into a float plane; no intermediate rounding.
    let mut mid = vec![0f64; wu * hu * 3];
    exec::for_each_row(&mut mid, row_len, |y, row| {
        let src_row = &src[y * row_len..(y + 1) * row_len];
        for x in 0..wu {
            let mut acc = [0f64; 3];
            for (k, wk) in weights.iter().enumerate() {
                let sx = clamp_index(x as i64 + k as i64 - radius, w);
                for c in 0..3 {
                    acc[c] += wk * src_row[sx * 3 + c] as f64;
                }
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    });

    // Vertical pass reads the float plane and rounds once.
    let mut out = vec![0u8; wu * hu * 3];
    exec::for_each_row(&mut out, row_len, |y, row| {
        for x in 0..wu {
            let mut acc = [0f64; 3];
            for (k, wk) in weights.iter().enumerate() {
                let sy = clamp_index(y as i64 + k as i64 - radius, h);
                let base = (sy * wu + x) * 3;
                for c in 0..3 {
                    acc[c] += wk * mid[base + c];
                }
            }
            for c in 0..3 {
                row[x * 3 + c] = acc[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    });

    ImageRaster::from_pixels(w, h, out)
}

pub fn resize_bilinear(img: &ImageRaster, new_width: u32, new_height: u32) -> Result<ImageRaster, RasterError> {
    if new_width == 0 || new_height == 0 {
        return Err(RasterError::InvalidParameter("resize dimensions must be nonzero".into()));
    }
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let (dw, dh) = (new_width as usize, new_height as usize);
    let scale_x = sw as f64 / dw as f64;
    let scale_y = sh as f64 / dh as f64;
    let src = img.as_bytes();
    let row_len = dw * 3;

    let mut out = vec![0u8; dw * dh * 3];
    exec::for_each_row(&mut out, row_len, |y, row| {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let p00 = src[(y0 * sw + x0) * 3 + c] as f64;
                let p01 = src[(y0 * sw + x1) * 3 + c] as f64;
                let p10 = src[(y1 * sw + x0) * 3 + c] as f64;
                let p11 = src[(y1 * sw + x1) * 3 + c] as f64;
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                let v = top + (bot - top) * fy;
                row[x * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    });

    ImageRaster::from_pixels(new_width, new_height, out)
}
