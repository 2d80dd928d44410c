//! Street-view encoder, spatial-aware aggregation and descriptor distance.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvConfig, InstanceNorm, Linear, Mode, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreetEncoderConfig {
    /// Width of the stem and first stage; later stages use 2x and 4x.
    pub base_channels: usize,
    /// Basic blocks per stage.
    pub blocks: [usize; 3],
}

impl Default for StreetEncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            blocks: [3, 4, 6],
        }
    }
}

impl StreetEncoderConfig {
    pub fn out_channels(&self) -> usize {
        4 * self.base_channels
    }
}

/// ResNet basic block; the shortcut gets a 1x1 projection when the shape changes.
struct BasicBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
    shortcut: Option<(Conv2d, InstanceNorm)>,
}

fn plain_conv(kernel: usize, stride: usize, padding: usize) -> ConvConfig {
    let mut cfg = ConvConfig::new(kernel, stride, padding).plain();
    cfg.bias = false;
    cfg
}

impl BasicBlock {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(&pb.pp("proj"), c_in, c_out, plain_conv(1, stride, 0))?,
                InstanceNorm::new(&pb.pp("proj_norm"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&pb.pp("conv1"), c_in, c_out, plain_conv(3, stride, 1))?,
            norm1: InstanceNorm::new(&pb.pp("norm1"), c_out)?,
            conv2: Conv2d::new(&pb.pp("conv2"), c_out, c_out, plain_conv(3, 1, 1))?,
            norm2: InstanceNorm::new(&pb.pp("norm2"), c_out)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x, mode)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h, mode)?)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x, mode)?)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// ResNet34-style backbone truncated after its third stage, with that stage
/// kept at stride 1 so the total stride is 8.
pub struct StreetEncoder {
    cfg: StreetEncoderConfig,
    stem: Conv2d,
    stem_norm: InstanceNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl StreetEncoder {
    pub fn new(pb: &ParamBuilder, cfg: StreetEncoderConfig) -> Result<Self> {
        let b = cfg.base_channels;
        if b == 0 || cfg.blocks.contains(&0) {
            return Err(Error::Config(format!("invalid street encoder config {cfg:?}")));
        }
        let widths = [b, 2 * b, 4 * b];
        let strides = [1, 2, 1];
        let mut stages = Vec::with_capacity(3);
        let mut c_in = b;
        for (s, ((&n, &width), &stride)) in cfg.blocks.iter().zip(&widths).zip(&strides).enumerate() {
            let stage_pb = pb.pp(format!("stage{}", s + 1));
            let mut blocks = Vec::with_capacity(n);
            for i in 0..n {
                let stride = if i == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(&stage_pb.pp(format!("block{i}")), c_in, width, stride)?);
                c_in = width;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stem: Conv2d::new(&pb.pp("stem"), 3, b, plain_conv(7, 2, 3))?,
            stem_norm: InstanceNorm::new(&pb.pp("stem_norm"), b)?,
            stages,
            cfg,
        })
    }

    pub fn config(&self) -> &StreetEncoderConfig {
        &self.cfg
    }

    /// `(N, 3, H, W)` street panoramas to `(N, 4b, H/8, W/8)` local features.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let d = x.dims();
        if d.len() != 4 || d[1] != 3 || d[2] % 8 != 0 || d[3] % 8 != 0 {
            return Err(Error::shape("street encoder input", ("N", 3, "8k", "8k"), d));
        }
        let h = self.stem_norm.forward(&self.stem.forward(x, mode)?)?.relu()?;
        let mut h = h.max_pool2d(2)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, mode)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    /// Number of attention masks `k`.
    pub masks: usize,
    /// Hidden width of each mask head as a fraction of `H·W`.
    pub hidden_ratio: f64,
    pub normalize_descriptor: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            masks: 8,
            hidden_ratio: 0.5,
            normalize_descriptor: true,
        }
    }
}

/// Spatial-aware feature aggregation: `k` attention masks predicted from the
/// channel-wise max of the features, each pooling the features into one
/// `C`-vector by a Frobenius inner product.
pub struct SpatialAggregation {
    heads: Vec<(Linear, Linear)>,
    height: usize,
    width: usize,
    normalize: bool,
}

pub struct Aggregated {
    /// `(N, k·C)`
    pub descriptor: Tensor,
    /// `(N, k, H, W)`
    pub masks: Tensor,
}

impl SpatialAggregation {
    pub fn new(pb: &ParamBuilder, cfg: &AggregationConfig, height: usize, width: usize) -> Result<Self> {
        if cfg.masks == 0 || cfg.hidden_ratio.is_nan() || cfg.hidden_ratio <= 0.0 {
            return Err(Error::Config(format!("invalid aggregation config {cfg:?}")));
        }
        let hw = height * width;
        let hidden = ((hw as f64 * cfg.hidden_ratio).round() as usize).max(1);
        let heads = (0..cfg.masks)
            .map(|i| {
                let p = pb.pp(format!("head{i}"));
                Ok((Linear::new(&p.pp("fc1"), hw, hidden)?, Linear::new(&p.pp("fc2"), hidden, hw)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            height,
            width,
            normalize: cfg.normalize_descriptor,
        })
    }

    /// `(N, k, H, W)` masks for `(N, C, H, W)` features.
    pub fn compute_masks(&self, features: &Tensor) -> Result<Tensor> {
        let (n, _c, h, w) = features.dims4()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape("aggregation features", (self.height, self.width), (h, w)));
        }
        let pooled = features.max_keepdim(1)?.reshape((n, h * w))?;
        let masks = self
            .heads
            .iter()
            .map(|(fc1, fc2)| fc2.forward(&fc1.forward(&pooled)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&masks, 1)?.reshape((n, self.heads.len(), h, w))?)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Aggregated> {
        let masks = self.compute_masks(features)?;
        let descriptor = aggregate(features, &masks, self.normalize)?;
        Ok(Aggregated { descriptor, masks })
    }
}

/// Frobenius products of every mask with every channel, stacked mask-major
/// into `(N, k·C)` and optionally L2-normalized.
pub fn aggregate(features: &Tensor, masks: &Tensor, normalize: bool) -> Result<Tensor> {
    let (n, c, h, w) = features.dims4()?;
    let (nm, k, hm, wm) = masks.dims4()?;
    if (n, h, w) != (nm, hm, wm) {
        return Err(Error::shape("aggregate masks", (n, h, w), (nm, hm, wm)));
    }
    let f = features.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?;
    let m = masks.reshape((n, k, h * w))?;
    let desc = m.matmul(&f)?.reshape((n, k * c))?;
    if normalize {
        l2_normalize_rows(&desc)
    } else {
        Ok(desc)
    }
}

pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `(N, M)` matrix of squared Euclidean distances between rows of `a` and `b`.
pub fn pairwise_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    let (m, db) = b.dims2()?;
    if d != db {
        return Err(Error::shape("pairwise distances", d, db));
    }
    let diff = a.unsqueeze(1)?.broadcast_sub(&b.unsqueeze(0)?)?;
    Ok(diff.sqr()?.sum(2)?.reshape((n, m))?)
}

/// Global image embedding used for retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(pub Vec<f32>);

impl Descriptor {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }

    /// Rows of an `(N, D)` tensor.
    pub fn from_rows(t: &Tensor) -> Result<Vec<Descriptor>> {
        let rows = t.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        Ok(rows.into_iter().map(Descriptor).collect())
    }
}

/// Squared Euclidean distance, accumulated in `f64` in index order.
pub fn distance(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("descriptor distance", a.len(), b.len()));
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorEntry {
    pub id: String,
    /// Element offset of the descriptor in the data file.
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorManifest {
    pub dim: usize,
    pub entries: Vec<DescriptorEntry>,
}

/// Descriptors with their ids and optional coordinates, stored as a flat
/// little-endian `f32` file plus a JSON sidecar (`<file>.json`).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDb {
    pub ids: Vec<String>,
    pub coords: Vec<Option<(f64, f64)>>,
    pub descriptors: Vec<Descriptor>,
}

impl DescriptorDb {
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let dim = self.descriptors.first().map_or(0, Descriptor::len);
        if self.ids.len() != self.descriptors.len() || self.coords.len() != self.descriptors.len() {
            return Err(Error::InvalidArgument("descriptor db columns differ in length".into()));
        }
        let mut entries = Vec::with_capacity(self.ids.len());
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (i, d) in self.descriptors.iter().enumerate() {
            if d.len() != dim {
                return Err(Error::shape("descriptor db row", dim, d.len()));
            }
            for v in &d.0 {
                out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
            entries.push(DescriptorEntry {
                id: self.ids[i].clone(),
                offset: (i * dim) as u64,
                coords: self.coords[i],
            });
        }
        out.flush().map_err(|e| Error::io(path, e))?;
        let manifest = DescriptorManifest { dim, entries };
        let side = Self::sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let manifest: DescriptorManifest = serde_json::from_slice(&text)?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Data(format!("{}: truncated float32 data", path.display())));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut db = DescriptorDb {
            ids: Vec::new(),
            coords: Vec::new(),
            descriptors: Vec::new(),
        };
        for e in manifest.entries {
            let start = e.offset as usize;
            let end = start + manifest.dim;
            if end > values.len() {
                return Err(Error::Data(format!("{}: entry {} out of range", path.display(), e.id)));
            }
            db.ids.push(e.id);
            db.coords.push(e.coords);
            db.descriptors.push(Descriptor(values[start..end].to_vec()));
        }
        Ok(db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    #[test]
    fn toy_street_shape() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let enc = StreetEncoder::new(&store.root(), StreetEncoderConfig::default()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 3, 16, 88), &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&x, Mode::Eval).unwrap().dims(), &[1, 256, 2, 11]);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let cfg = StreetEncoderConfig {
            base_channels: 4,
            blocks: [1, 1, 1],
        };
        let enc = StreetEncoder::new(&store.root(), cfg).unwrap();
        let x = Tensor::zeros((1, 3, 16, 88), DType::F32, &Device::Cpu).unwrap();
        let y = enc.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn dominant_channel_pools_through() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let cfg = AggregationConfig {
            masks: 2,
            hidden_ratio: 1.0,
            normalize_descriptor: false,
        };
        let sa = SpatialAggregation::new(&store.root(), &cfg, 2, 3).unwrap();
        // Identity mask heads.
        for i in 0..2 {
            for fc in ["fc1", "fc2"] {
                let eye = Tensor::eye(6, DType::F64, &Device::Cpu).unwrap();
                store.assign(&format!("head{i}.{fc}.weight"), &eye).unwrap();
            }
        }
        let mut f = Tensor::randn(0f64, 1.0, (1, 4, 2, 3), &Device::Cpu).unwrap();
        // Channel 2 dominates everywhere.
        let boost = Tensor::zeros((1, 4, 2, 3), DType::F64, &Device::Cpu).unwrap()
            .slice_assign(&[0..1, 2..3, 0..2, 0..3], &Tensor::full(100f64, (1, 1, 2, 3), &Device::Cpu).unwrap())
            .unwrap();
        f = (f + boost).unwrap();
        let masks = sa.compute_masks(&f).unwrap();
        let chan = f.narrow(1, 2, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..2 {
            let m = masks.narrow(1, i, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(m, chan);
        }
    }

    #[test]
    fn ones_and_one_hot_masks() {
        let dev = Device::Cpu;
        let f = Tensor::randn(0f64, 1.0, (1, 3, 2, 4), &dev).unwrap();
        let ones = Tensor::ones((1, 1, 2, 4), DType::F64, &dev).unwrap();
        let d = aggregate(&f, &ones, false).unwrap().to_vec2::<f64>().unwrap();
        let sums = f.sum((2, 3)).unwrap().to_vec2::<f64>().unwrap();
        for c in 0..3 {
            assert!((d[0][c] - sums[0][c]).abs() < 1e-12);
        }
        let mut hot = vec![0f64; 8];
        hot[6] = 1.0; // (h=1, w=2)
        let hot = Tensor::from_vec(hot, (1, 1, 2, 4), &dev).unwrap();
        let d = aggregate(&f, &hot, false).unwrap().to_vec2::<f64>().unwrap();
        let col = f.narrow(2, 1, 1).unwrap().narrow(3, 2, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(d[0], col);
    }

    #[test]
    fn distance_properties() {
        let a = Descriptor(vec![0.6, 0.8]);
        let b = Descriptor(vec![1.0, 0.0]);
        assert_eq!(distance(&a, &a).unwrap(), 0.0);
        let d = distance(&a, &b).unwrap();
        assert!((d - (2.0 - 2.0 * 0.6)).abs() < 1e-6);
        assert_eq!(d, distance(&b, &a).unwrap());
        assert!(distance(&a, &Descriptor(vec![1.0])).is_err());
    }

    #[test]
    fn db_round_trip() {
        let dir = tempdir();
        let db = DescriptorDb {
            ids: vec!["a".into(), "b".into()],
            coords: vec![Some((1.0, 2.0)), None],
            descriptors: vec![Descriptor(vec![1.0, -2.5, 3.0]), Descriptor(vec![0.0, 0.5, f32::MIN_POSITIVE])],
        };
        let path = dir.join("gallery.f32");
        db.write(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 24);
        assert_eq!(DescriptorDb::read(&path).unwrap(), db);
        std::fs::remove_dir_all(dir).ok();
    }

    fn tempdir() -> PathBuf {
        let d = std::env::temp_dir().join(format!("xview-db-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }
}
