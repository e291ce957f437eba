use std::path::Path;

use image::{Rgb, RgbImage};

use super::{Heatmap, RelevancyError};
use crate::data::Image;

/// Output pixels per input pixel.
const SCALE: u32 = 8;
const ALPHA: f64 = 0.55;
const GAP: u32 = 8;

/// Black through red and yellow to white.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)]
}

fn overlay(image: &Image, heat: &Heatmap) -> RgbImage {
    let (w, h) = (image.width as u32 * SCALE, image.height as u32 * SCALE);
    RgbImage::from_fn(w, h, |x, y| {
        let (ix, iy) = ((x / SCALE) as usize, (y / SCALE) as usize);
        let cell = heat.at(iy * heat.grid / image.height, ix * heat.grid / image.width);
        let base = image.get(iy, ix);
        let hot = colormap(cell);
        Rgb(std::array::from_fn(|c| ((1.0 - ALPHA) * base[c] as f64 + ALPHA * hot[c] as f64).round() as u8))
    })
}

/// The input image upscaled with the heatmap blended on top.
pub fn render_overlay(image: &Image, heat: &Heatmap, path: &Path) -> Result<(), RelevancyError> {
    overlay(image, heat).save(path)?;
    Ok(())
}

/// Two overlays of the same image next to each other, left then right.
pub fn render_comparison(image: &Image, left: &Heatmap, right: &Heatmap, path: &Path) -> Result<(), RelevancyError> {
    let (a, b) = (overlay(image, left), overlay(image, right));
    let mut out = RgbImage::from_pixel(a.width() + GAP + b.width(), a.height().max(b.height()), Rgb([255, 255, 255]));
    image::imageops::replace(&mut out, &a, 0, 0);
    image::imageops::replace(&mut out, &b, (a.width() + GAP) as i64, 0);
    out.save(path)?;
    Ok(())
}
