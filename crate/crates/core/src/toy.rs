//! Procedural paired corpus for desk-scale experiments.
//!
//! Each scene is an overhead raster built from simple primitives. Its street
//! panorama is the polar warp of that raster with a sky band pasted over the
//! top rows and facade stripes drawn at every landmark's azimuth, so the two
//! views share content exactly while the street view carries detail the
//! overhead view cannot show.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::polar::{polar_transform, OutOfBounds, PolarParams};
use crate::raster::{RasterImage, ValueRange};

pub const GENERATOR_VERSION: &str = "toy-scenes/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub geometry: PolarParams,
    /// Fraction of panorama rows covered by sky.
    pub sky_fraction: f64,
    /// Inclusive range of landmarks per scene.
    pub landmarks: (usize, usize),
}

impl ToyConfig {
    pub fn new(geometry: PolarParams) -> Self {
        Self {
            geometry,
            sky_fraction: 0.3,
            landmarks: (2, 4),
        }
    }

    pub fn sky_rows(&self) -> usize {
        (self.sky_fraction * self.geometry.polar_height as f64).round() as usize
    }

    /// Rows below the sky that carry facade stripes.
    pub fn facade_rows(&self) -> std::ops::Range<usize> {
        let start = self.sky_rows();
        let len = ((0.25 * self.geometry.polar_height as f64).round() as usize).max(1);
        start..(start + len).min(self.geometry.polar_height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    /// Radians clockwise from north (image up).
    pub azimuth: f64,
    /// Distance from the center as a fraction of the half-width.
    pub radius: f64,
    pub color: [f32; 3],
}

#[derive(Debug, Clone)]
pub struct ToyScene {
    /// Unit range, already quantized to 8-bit levels.
    pub satellite: RasterImage,
    /// Unit range, quantized.
    pub panorama: RasterImage,
    /// `H × W` row-major flags for pixels drawn only in the street view
    /// (sky excluded).
    pub street_only: Vec<bool>,
    pub landmarks: Vec<Landmark>,
}

fn quantize(img: &mut RasterImage) {
    for v in img.data_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Angular distance on the circle.
fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

pub fn fabricate_scene<R: Rng + ?Sized>(cfg: &ToyConfig, rng: &mut R) -> Result<ToyScene> {
    let g = cfg.geometry;
    g.validate()?;
    let s = g.sat_width;
    let half = s as f64 / 2.0;
    let mut sat = RasterImage::filled(3, s, s, ValueRange::Unit, 0.0)?;

    // Textured ground.
    let base = hsv(rng.random_range(0.05..0.35), rng.random_range(0.25..0.5), rng.random_range(0.35..0.55));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * TAU / s as f64,
                rng.random_range(0.5..3.0) * TAU / s as f64,
                rng.random_range(0.0..TAU),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    for y in 0..s {
        for x in 0..s {
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                sat.set(c, y, x, base[c] + tex as f32);
            }
        }
    }

    let paint = |img: &mut RasterImage, pred: &dyn Fn(f64, f64) -> bool, color: [f32; 3]| {
        for y in 0..s {
            for x in 0..s {
                // Offsets from the warp's center, north-up.
                let (dx, dy) = (x as f64 - half, half - y as f64);
                if pred(dx, dy) {
                    for c in 0..3 {
                        img.set(c, y, x, color[c]);
                    }
                }
            }
        }
    };

    // Rings around the camera.
    let rings = rng.random_range(1..=2);
    for _ in 0..rings {
        let r = rng.random_range(0.35..0.95) * half;
        let w = (s as f64 / 40.0).max(1.0);
        let shade = rng.random_range(0.55..0.8) as f32;
        paint(&mut sat, &|dx, dy| ((dx * dx + dy * dy).sqrt() - r).abs() <= w / 2.0, [shade; 3]);
    }

    // Radial roads.
    let roads = rng.random_range(1..=3);
    for _ in 0..roads {
        let az: f64 = rng.random_range(0.0..TAU);
        let (ux, uy) = (az.sin(), az.cos());
        let w = (s as f64 / 24.0).max(1.0);
        let shade = rng.random_range(0.12..0.25) as f32;
        paint(
            &mut sat,
            &|dx, dy| {
                let along = dx * ux + dy * uy;
                let across = (dx * uy - dy * ux).abs();
                along >= 0.0 && across <= w / 2.0
            },
            [shade; 3],
        );
    }

    // Landmarks, kept apart in azimuth so their stripes do not merge.
    let count = rng.random_range(cfg.landmarks.0..=cfg.landmarks.1);
    let mut landmarks: Vec<Landmark> = Vec::with_capacity(count);
    let min_gap = TAU / (3.0 * cfg.landmarks.1.max(1) as f64);
    while landmarks.len() < count {
        let azimuth = rng.random_range(0.0..TAU);
        if landmarks.iter().any(|l| angle_gap(l.azimuth, azimuth) < min_gap) {
            continue;
        }
        landmarks.push(Landmark {
            azimuth,
            radius: rng.random_range(0.45..0.85),
            color: hsv(rng.random_range(0.0..1.0), rng.random_range(0.7..1.0), rng.random_range(0.75..1.0)),
        });
    }
    let blob = s as f64 / 12.0;
    for l in &landmarks {
        let (cx, cy) = (l.radius * half * l.azimuth.sin(), l.radius * half * l.azimuth.cos());
        paint(&mut sat, &|dx, dy| (dx - cx).powi(2) + (dy - cy).powi(2) <= blob * blob, l.color);
    }

    for v in sat.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    quantize(&mut sat);

    let mut pano = polar_transform(&sat, &g, OutOfBounds::Clamp)?;
    let (hp, wp) = (g.polar_height, g.polar_width);
    let sky_rows = cfg.sky_rows();
    for y in 0..sky_rows {
        let t = y as f32 / sky_rows.max(1) as f32;
        let sky = [0.45 + 0.25 * t, 0.65 + 0.2 * t, 0.95];
        for x in 0..wp {
            for c in 0..3 {
                pano.set(c, y, x, sky[c]);
            }
        }
    }
    let mut street_only = vec![false; hp * wp];
    let half_stripe = (wp as f64 / 88.0).max(0.5);
    for l in &landmarks {
        let center = l.azimuth / TAU * wp as f64;
        let color = l.color.map(|c| c * 0.6);
        for x in 0..wp {
            let dx = (x as f64 - center).rem_euclid(wp as f64);
            let dx = dx.min(wp as f64 - dx);
            if dx > half_stripe {
                continue;
            }
            for y in cfg.facade_rows() {
                street_only[y * wp + x] = true;
                for c in 0..3 {
                    pano.set(c, y, x, color[c]);
                }
            }
        }
    }
    quantize(&mut pano);

    Ok(ToyScene {
        satellite: sat,
        panorama: pano,
        street_only,
        landmarks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetadata {
    pub generator_version: String,
    pub seed: u64,
    pub pairs: usize,
    pub split: String,
    pub config: ToyConfig,
}

/// Per-pair generator; pair `i` depends only on `(seed, i)`.
pub fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Writes `{root}/{split}/{satellite,street}/{id}.png`, `manifest.csv` and
/// `corpus.json` under `{root}/{split}`, and returns the loaded manifest.
pub fn make_toy_dataset(root: &Path, split: &str, n_pairs: usize, cfg: &ToyConfig, seed: u64) -> Result<DatasetManifest> {
    if n_pairs < 1 {
        return Err(Error::InvalidArgument("toy corpus needs at least one pair".into()));
    }
    let dir = root.join(split);
    for sub in ["satellite", "street"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut csv = String::from("id,satellite,street,easting,northing\n");
    for i in 0..n_pairs {
        let mut rng = pair_rng(seed, i);
        let scene = fabricate_scene(cfg, &mut rng)?;
        let easting = rng.random_range(0.0..1000.0f64);
        let northing = rng.random_range(0.0..1000.0f64);
        let id = format!("{split}-{i:05}");
        let sat_rel = PathBuf::from("satellite").join(format!("{id}.png"));
        let st_rel = PathBuf::from("street").join(format!("{id}.png"));
        scene.satellite.save_png(dir.join(&sat_rel))?;
        scene.panorama.save_png(dir.join(&st_rel))?;
        writeln!(
            csv,
            "{id},{},{},{easting:.3},{northing:.3}",
            sat_rel.display(),
            st_rel.display()
        )
        .expect("writing to a String cannot fail");
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, csv).map_err(|e| Error::io(&manifest_path, e))?;
    let meta = CorpusMetadata {
        generator_version: GENERATOR_VERSION.into(),
        seed,
        pairs: n_pairs,
        split: split.into(),
        config: *cfg,
    };
    let meta_path = dir.join("corpus.json");
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    load_manifest(&manifest_path)
}
