//! Dense planar images with an explicit value range.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The interval sample values are declared to live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 255]`
    Raw,
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Raw => (0.0, 255.0),
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }

    /// Width of the interval, `L` in the image-quality formulas.
    pub fn span(self) -> f64 {
        let (lo, hi) = self.bounds();
        f64::from(hi - lo)
    }
}

/// Channel-major (`c, y, x`) image with row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    channels: usize,
    height: usize,
    width: usize,
    range: ValueRange,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        range: ValueRange,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "raster must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("raster must be non-empty".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "raster data",
                channels * height * width,
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            range,
            data,
        })
    }

    pub fn filled(
        channels: usize,
        height: usize,
        width: usize,
        range: ValueRange,
        value: f32,
    ) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            range,
            vec![value; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Affinely maps values from the declared range onto `target`.
    pub fn to_range(&self, target: ValueRange) -> RasterImage {
        if target == self.range {
            return self.clone();
        }
        let (lo, hi) = self.range.bounds();
        let (tlo, thi) = target.bounds();
        let scale = (thi - tlo) / (hi - lo);
        let data = self
            .data
            .iter()
            .map(|&v| tlo + (v - lo) * scale)
            .collect();
        RasterImage {
            data,
            range: target,
            ..*self
        }
    }

    /// Mirrors every row left to right.
    pub fn flip_horizontal(&self) -> RasterImage {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Circular shift of every row by `m` columns to the right.
    pub fn roll_horizontal(&self, m: usize) -> RasterImage {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.rotate_right(m % self.width);
        }
        out
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// True when every sample lies in the declared range, allowing `tol` slack.
    pub fn within_range(&self, tol: f32) -> bool {
        let (lo, hi) = self.range.bounds();
        let (mn, mx) = self.min_max();
        mn >= lo - tol && mx <= hi + tol
    }

    /// Replicates a single-channel image to three channels.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        RasterImage {
            channels: 3,
            data,
            ..*self
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<RasterImage> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]);
            }
        }
        RasterImage::new(3, h, w, ValueRange::Raw, data)
    }

    /// Quantizes to 8 bits (rounding, clamped) in the raw range.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.to_rgb().to_range(ValueRange::Raw);
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| {
                raw.get(c, y as usize, x as usize)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `(1, C, H, W)` tensor with the raw sample values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks same-shaped images into `(N, C, H, W)`.
    pub fn stack(images: &[&RasterImage], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.shape() != first.shape() {
                return Err(Error::shape("image stack", first.shape(), img.shape()));
            }
            data.extend_from_slice(&img.data);
        }
        let (c, h, w) = first.shape();
        let t = Tensor::from_vec(data, (images.len(), c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits an `(N, C, H, W)` tensor into images tagged with `range`.
    pub fn unstack(t: &Tensor, range: ValueRange) -> Result<Vec<RasterImage>> {
        let (n, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks_exact(c * h * w)
            .take(n)
            .map(|chunk| RasterImage::new(c, h, w, range, chunk.to_vec()))
            .collect()
    }
}
