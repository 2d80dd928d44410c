//! Overhead-to-panorama coordinate change and bilinear resampling.
//!
//! Output column `x` spans azimuth `2πx / W_ps` measured clockwise from the
//! satellite's up direction; output row `y` samples the circle of radius
//! `(y / H_ps) · W_s / 2` around the image center. Row 0 therefore collapses
//! onto the center pixel and the last row approaches the inscribed circle.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolarParams {
    pub sat_width: usize,
    pub sat_height: usize,
    pub polar_width: usize,
    pub polar_height: usize,
}

impl Default for PolarParams {
    fn default() -> Self {
        Self::new(750, 112, 616)
    }
}

impl PolarParams {
    /// Square `sat_size` satellite to a `polar_height × polar_width` strip.
    pub const fn new(sat_size: usize, polar_height: usize, polar_width: usize) -> Self {
        Self {
            sat_width: sat_size,
            sat_height: sat_size,
            polar_width,
            polar_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sat_width == 0
            || self.sat_height == 0
            || self.polar_width == 0
            || self.polar_height == 0
        {
            return Err(Error::InvalidArgument(format!(
                "polar geometry must be strictly positive: {self:?}"
            )));
        }
        if self.sat_width != self.sat_height {
            return Err(Error::InvalidArgument(format!(
                "satellite image must be square, got {}x{}",
                self.sat_width, self.sat_height
            )));
        }
        Ok(())
    }
}

/// How samples that fall outside the satellite raster are resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfBounds {
    /// Use the nearest valid pixel.
    #[default]
    Clamp,
    /// Treat everything outside the raster as zero.
    Zero,
}

/// Source position in the satellite image for polar pixel `(x_ps, y_ps)`.
///
/// Integer source coordinates address pixel centers; the result is usually
/// fractional.
pub fn polar_source_coords(x_ps: f64, y_ps: f64, params: &PolarParams) -> (f64, f64) {
    let ws = params.sat_width as f64;
    let hs = params.sat_height as f64;
    let radius = y_ps / params.polar_height as f64;
    let theta = TAU * x_ps / params.polar_width as f64;
    let x_s = ws / 2.0 + ws / 2.0 * radius * theta.sin();
    let y_s = hs / 2.0 - hs / 2.0 * radius * theta.cos();
    (x_s, y_s)
}

/// Bilinear sample of channel `c` at fractional `(x, y)`.
pub fn sample_bilinear(img: &RasterImage, c: usize, x: f64, y: f64, oob: OutOfBounds) -> f32 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (x0, y0) = (x0 as isize, y0 as isize);

    let fetch = |xi: isize, yi: isize| -> f32 {
        match oob {
            OutOfBounds::Clamp => {
                let xi = xi.clamp(0, w - 1) as usize;
                let yi = yi.clamp(0, h - 1) as usize;
                img.get(c, yi, xi)
            }
            OutOfBounds::Zero => {
                if xi < 0 || yi < 0 || xi >= w || yi >= h {
                    0.0
                } else {
                    img.get(c, yi as usize, xi as usize)
                }
            }
        }
    };

    let top = fetch(x0, y0) * (1.0 - fx) + fetch(x0 + 1, y0) * fx;
    let bottom = fetch(x0, y0 + 1) * (1.0 - fx) + fetch(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps a square overhead image into its `polar_height × polar_width` strip.
pub fn polar_transform(
    satellite: &RasterImage,
    params: &PolarParams,
    oob: OutOfBounds,
) -> Result<RasterImage> {
    params.validate()?;
    if satellite.height() != params.sat_height || satellite.width() != params.sat_width {
        return Err(Error::shape(
            "polar_transform satellite",
            (params.sat_height, params.sat_width),
            (satellite.height(), satellite.width()),
        ));
    }
    let (hp, wp) = (params.polar_height, params.polar_width);
    let channels = satellite.channels();

    // Source coordinates depend only on the output pixel; compute them once.
    let coords: Vec<(f64, f64)> = (0..hp)
        .flat_map(|y| (0..wp).map(move |x| (x, y)))
        .map(|(x, y)| polar_source_coords(x as f64, y as f64, params))
        .collect();

    let mut data = Vec::with_capacity(channels * hp * wp);
    for c in 0..channels {
        data.extend(
            coords
                .iter()
                .map(|&(xs, ys)| sample_bilinear(satellite, c, xs, ys, oob)),
        );
    }
    RasterImage::new(channels, hp, wp, satellite.range(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ValueRange;

    #[test]
    fn center_row_collapses() {
        let p = PolarParams::new(100, 10, 40);
        for x in 0..40 {
            let (xs, ys) = polar_source_coords(x as f64, 0.0, &p);
            assert_eq!((xs, ys), (50.0, 50.0));
        }
    }

    #[test]
    fn cardinal_directions() {
        let p = PolarParams::new(100, 10, 40);
        let (xs, ys) = polar_source_coords(0.0, 10.0, &p);
        assert_eq!((xs, ys), (50.0, 0.0));
        let (xs, ys) = polar_source_coords(10.0, 10.0, &p);
        assert!((xs - 100.0).abs() < 1e-12 && (ys - 50.0).abs() < 1e-12);
    }

    #[test]
    fn constant_in_constant_out() {
        let sat = RasterImage::filled(3, 64, 64, ValueRange::Unit, 0.25).unwrap();
        let p = PolarParams::new(64, 16, 88);
        for oob in [OutOfBounds::Clamp, OutOfBounds::Zero] {
            let out = polar_transform(&sat, &p, oob).unwrap();
            assert_eq!(out.shape(), (3, 16, 88));
            assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn rejects_mismatched_geometry() {
        let sat = RasterImage::filled(3, 64, 64, ValueRange::Unit, 0.0).unwrap();
        assert!(polar_transform(&sat, &PolarParams::new(32, 8, 44), OutOfBounds::Clamp).is_err());
        let p = PolarParams {
            sat_width: 64,
            sat_height: 32,
            polar_width: 8,
            polar_height: 8,
        };
        assert!(p.validate().is_err());
        assert!(PolarParams::new(0, 8, 8).validate().is_err());
    }

    #[test]
    fn radial_ray_becomes_column_zero_stripe() {
        // A one-pixel ray from the center straight up to the top edge.
        let mut sat = RasterImage::filled(1, 64, 64, ValueRange::Unit, 0.0).unwrap();
        for y in 0..=32 {
            sat.set(0, y, 32, 1.0);
        }
        let p = PolarParams::new(64, 16, 64);
        let out = polar_transform(&sat, &p, OutOfBounds::Clamp).unwrap();
        // Brute-force per-pixel evaluation of the warp, independent of the
        // transform's coordinate caching.
        for y in 0..16 {
            for x in 0..64 {
                let r = y as f64 / 16.0 * 32.0;
                let th = TAU * x as f64 / 64.0;
                let (xs, ys) = (32.0 + r * th.sin(), 32.0 - r * th.cos());
                let expected = sample_bilinear(&sat, 0, xs, ys, OutOfBounds::Clamp);
                assert_eq!(out.get(0, y, x), expected);
            }
        }
        for y in 0..16 {
            assert!((out.get(0, y, 0) - 1.0).abs() < 1e-6, "row {y}");
        }
        // Away from the center, the stripe is confined to the columns next to
        // zero (which wrap around to the far side).
        for y in 8..16 {
            for x in 2..62 {
                assert!(out.get(0, y, x) < 1e-6, "({y},{x}) = {}", out.get(0, y, x));
            }
        }
    }

    #[test]
    fn canonical_geometry() {
        let sat = RasterImage::filled(3, 750, 750, ValueRange::Raw, 7.0).unwrap();
        let out = polar_transform(&sat, &PolarParams::default(), OutOfBounds::Clamp).unwrap();
        assert_eq!(out.shape(), (3, 112, 616));
    }

    #[test]
    fn zero_policy_blanks_outside() {
        let sat = RasterImage::filled(1, 10, 10, ValueRange::Unit, 1.0).unwrap();
        assert_eq!(sample_bilinear(&sat, 0, -3.0, 4.0, OutOfBounds::Zero), 0.0);
        assert_eq!(sample_bilinear(&sat, 0, -3.0, 4.0, OutOfBounds::Clamp), 1.0);
        assert!((sample_bilinear(&sat, 0, 9.5, 4.0, OutOfBounds::Zero) - 0.5).abs() < 1e-6);
    }
}
