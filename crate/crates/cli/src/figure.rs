//! Side-by-side comparison strips.

use image::{Rgb, RgbImage};
use xview::RasterImage;

const GAP: u32 = 4;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// Places `panels` left to right, top-aligned, on a white canvas.
pub fn strip(panels: &[&RasterImage]) -> RgbImage {
    let tiles: Vec<RgbImage> = panels.iter().map(|p| p.to_rgb8()).collect();
    let width = tiles.iter().map(|t| t.width()).sum::<u32>() + GAP * tiles.len().saturating_sub(1) as u32;
    let height = tiles.iter().map(|t| t.height()).max().unwrap_or(0);
    let mut canvas = RgbImage::from_pixel(width.max(1), height.max(1), BACKGROUND);
    let mut x0 = 0;
    for t in &tiles {
        image::imageops::replace(&mut canvas, t, i64::from(x0), 0);
        x0 += t.width() + GAP;
    }
    canvas
}
