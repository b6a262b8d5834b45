//! Polar→cartesian resampling, red/cyan overlay composition, and bilinear
//! resizing.
//!
//! Polar slices store angle along rows and depth along columns. The cartesian
//! view places depth 0 at the image center and maps row r to the angle
//! θ = 2πr/H_a, with θ = 0 on the +x axis and θ increasing counterclockwise
//! in the (x, y) frame (the +y axis points down the output rows). Resampling
//! is inverse-mapping with bilinear interpolation — wrap-around across the
//! angle seam, clamping along depth — so the output has no holes.

mod volume;

pub use volume::{read_volume_metadata, render_stack, VolumeMetadata, VOLUME_FORMAT_VERSION};

use crate::error::{Error, Result};

/// A square cartesian view of a polar slice. `scale` is the number of output
/// pixels per depth sample; everything at radius ≥ `scale·W_d` is exactly 0.
#[derive(Debug, Clone)]
pub struct CartesianImage {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub scale: f64,
}

impl CartesianImage {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }
}

/// Bilinear sample of a polar image at fractional (row, col) coordinates,
/// wrapping rows (angle) and clamping columns (depth).
fn sample_polar(pixels: &[f32], h_a: usize, w_d: usize, a: f64, d: f64) -> f64 {
    let a0 = a.floor();
    let fa = a - a0;
    let r0 = (a0 as i64).rem_euclid(h_a as i64) as usize;
    let r1 = (r0 + 1) % h_a;

    let d0 = d.floor();
    let fd = d - d0;
    let c0 = (d0 as i64).clamp(0, w_d as i64 - 1) as usize;
    let c1 = (c0 + 1).min(w_d - 1);

    let v00 = pixels[r0 * w_d + c0] as f64;
    let v01 = pixels[r0 * w_d + c1] as f64;
    let v10 = pixels[r1 * w_d + c0] as f64;
    let v11 = pixels[r1 * w_d + c1] as f64;
    (1.0 - fa) * ((1.0 - fd) * v00 + fd * v01) + fa * ((1.0 - fd) * v10 + fd * v11)
}

/// Resamples an H_a × W_d polar image into an `out_size`-square cartesian
/// image. The radial scale `(out_size/2 − 1)/W_d` fits the full depth range
/// inside the half-width; pixels at or beyond depth W_d are 0.
pub fn polar_to_cartesian(
    pixels: &[f32],
    h_a: usize,
    w_d: usize,
    out_size: usize,
) -> Result<CartesianImage> {
    if pixels.len() != h_a * w_d || h_a == 0 || w_d == 0 {
        return Err(Error::ShapeMismatch {
            op: "polar_to_cartesian",
            details: format!("{} pixels for a {h_a}x{w_d} polar image", pixels.len()),
        });
    }
    if out_size < 2 || out_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "output size {out_size} must be an even number >= 2"
        )));
    }
    let scale = (out_size as f64 / 2.0 - 1.0) / w_d as f64;
    let center = out_size as f64 / 2.0;
    let mut out = vec![0.0f32; out_size * out_size];
    for row in 0..out_size {
        let y = row as f64 - center;
        for col in 0..out_size {
            let x = col as f64 - center;
            let d = x.hypot(y) / scale;
            if d >= w_d as f64 {
                continue;
            }
            let mut theta = y.atan2(x);
            if theta < 0.0 {
                theta += 2.0 * std::f64::consts::PI;
            }
            let a = theta / (2.0 * std::f64::consts::PI) * h_a as f64;
            out[row * out_size + col] = sample_polar(pixels, h_a, w_d, a, d) as f32;
        }
    }
    Ok(CartesianImage { size: out_size, pixels: out, scale })
}

/// Red/cyan composite: saliency drives the red channel, the OCT intensity
/// the green and blue channels. Inputs are clamped to [0, 1].
pub fn overlay(oct: &CartesianImage, saliency: &CartesianImage) -> Result<Vec<[f32; 3]>> {
    if oct.size != saliency.size {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            details: format!("oct {0}x{0} vs saliency {1}x{1}", oct.size, saliency.size),
        });
    }
    Ok(oct
        .pixels
        .iter()
        .zip(&saliency.pixels)
        .map(|(&o, &s)| {
            let o = o.clamp(0.0, 1.0);
            [s.clamp(0.0, 1.0), o, o]
        })
        .collect())
}

/// Converts an overlay to an 8-bit RGB image for PNG export.
pub fn overlay_to_rgb8(size: usize, pixels: &[[f32; 3]]) -> image::RgbImage {
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for (i, px) in pixels.iter().enumerate() {
        let quantize = |v: f32| (v * 255.0).round() as u8;
        img.put_pixel(
            (i % size) as u32,
            (i / size) as u32,
            image::Rgb([quantize(px[0]), quantize(px[1]), quantize(px[2])]),
        );
    }
    img
}

/// Bilinear resize with the half-pixel-center convention and edge clamping.
/// Equal input and output sizes reproduce the input exactly.
pub fn resize_bilinear(
    src: &[f32],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f32>> {
    if src.len() != h * w || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch {
            op: "resize_bilinear",
            details: format!("{} pixels for a {h}x{w} image", src.len()),
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be nonempty".into()));
    }
    let mut out = vec![0.0f32; out_h * out_w];
    for r in 0..out_h {
        let sr = ((r as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let r0 = sr.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fr = sr - r0 as f64;
        for c in 0..out_w {
            let sc =
                ((c as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let c0 = sc.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let fc = sc - c0 as f64;
            let top = (1.0 - fc) * src[r0 * w + c0] as f64 + fc * src[r0 * w + c1] as f64;
            let bottom = (1.0 - fc) * src[r1 * w + c0] as f64 + fc * src[r1 * w + c1] as f64;
            out[r * out_w + c] = ((1.0 - fr) * top + fr * bottom) as f32;
        }
    }
    Ok(out)
}
