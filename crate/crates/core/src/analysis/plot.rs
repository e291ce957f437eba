//! Effect plot: one panel per benchmark, one row per design term, a point at
//! β with 95% whiskers against a shared horizontal scale and a zero line.

use std::path::Path;

use font8x8::legacy::BASIC_LEGACY;
use image::{Rgb, RgbImage};

use super::{AnalysisError, EffectEstimate};

const PANEL_W: u32 = 300;
const ROW_H: u32 = 28;
const TOP: u32 = 28;
const BOTTOM: u32 = 24;
const LABEL_W: u32 = 112;
const MARGIN: u32 = 12;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRAY: Rgb<u8> = Rgb([170, 170, 170]);
const POINT: Rgb<u8> = Rgb([200, 40, 40]);

fn text(img: &mut RgbImage, x: u32, y: u32, s: &str, color: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        let glyph = BASIC_LEGACY[(ch as usize).min(127)];
        for (dy, bits) in glyph.iter().enumerate() {
            for dx in 0..8 {
                if bits & (1 << dx) != 0 {
                    let (px, py) = (x + i as u32 * 8 + dx, y + dy as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, color);
                    }
                }
            }
        }
    }
}

fn hline(img: &mut RgbImage, x0: u32, x1: u32, y: u32, color: Rgb<u8>) {
    for x in x0.min(x1)..=x0.max(x1) {
        img.put_pixel(x, y, color);
    }
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..=y1 {
        img.put_pixel(x, y, color);
    }
}

fn short(term: &str) -> String {
    term.replace("skip_pretrain", "skip").replace("dino_like", "dino").replace("large_lm", "large")
}

/// Draws the estimates (intercepts omitted) as a PNG. Bytes depend only on the input.
pub fn render_effect_plot(estimates: &[EffectEstimate], path: &Path) -> Result<(), AnalysisError> {
    if estimates.is_empty() {
        return Err(AnalysisError::Input("no estimates to plot".into()));
    }
    let terms = |e: &EffectEstimate| e.terms.iter().filter(|t| t.name != "intercept").cloned().collect::<Vec<_>>();
    let rows = estimates.iter().map(|e| terms(e).len()).max().unwrap_or(0) as u32;
    let reach = estimates
        .iter()
        .flat_map(&terms)
        .map(|t| t.ci_low.abs().max(t.ci_high.abs()))
        .fold(0.05f64, f64::max);
    let reach = (reach * 10.0).ceil() / 10.0;
    let height = TOP + rows * ROW_H + BOTTOM;
    let mut img = RgbImage::from_pixel(PANEL_W * estimates.len() as u32, height, WHITE);
    let plot_w = PANEL_W - LABEL_W - 2 * MARGIN;
    for (p, est) in estimates.iter().enumerate() {
        let x0 = p as u32 * PANEL_W;
        let left = x0 + LABEL_W + MARGIN;
        let to_x = |v: f64| left + (((v + reach) / (2.0 * reach)).clamp(0.0, 1.0) * plot_w as f64).round() as u32;
        text(&mut img, x0 + MARGIN, 8, est.benchmark.as_str(), BLACK);
        let bottom = TOP + rows * ROW_H;
        vline(&mut img, to_x(0.0), TOP, bottom, GRAY);
        hline(&mut img, left, left + plot_w, bottom, BLACK);
        text(&mut img, left, bottom + 6, &format!("-{reach:.1}"), BLACK);
        text(&mut img, left + plot_w - 32, bottom + 6, &format!("+{reach:.1}"), BLACK);
        for (r, t) in terms(est).iter().enumerate() {
            let y = TOP + r as u32 * ROW_H + ROW_H / 2;
            text(&mut img, x0 + MARGIN, y - 4, &short(&t.name), BLACK);
            hline(&mut img, to_x(t.ci_low), to_x(t.ci_high), y, BLACK);
            for x in [to_x(t.ci_low), to_x(t.ci_high)] {
                vline(&mut img, x, y - 4, y + 4, BLACK);
            }
            let cx = to_x(t.beta);
            for dx in 0..7 {
                vline(&mut img, (cx + dx).saturating_sub(3), y - 3, y + 3, POINT);
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageOutputFormat::Png)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
