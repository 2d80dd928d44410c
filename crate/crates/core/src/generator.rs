//! Residual U-Net that turns a polar-warped satellite image into a street
//! panorama. Its encoder half doubles as the satellite-side feature extractor
//! for retrieval.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvConfig, InstanceNorm, Mode, NonLocal, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Stem width; the encoder then runs at 2x, 4x and 8x this.
    pub base_channels: usize,
    pub bottleneck_blocks: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            bottleneck_blocks: 6,
            height: 112,
            width: 616,
        }
    }
}

impl GeneratorConfig {
    pub fn bottleneck_channels(&self) -> usize {
        8 * self.base_channels
    }

    /// `(C, H, W)` of the encoder output.
    pub fn bottleneck_shape(&self) -> (usize, usize, usize) {
        (self.bottleneck_channels(), self.height / 8, self.width / 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "generator geometry {}x{} must be a positive multiple of 8 with nonzero width",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// One named intermediate activation.
#[derive(Debug, Clone)]
pub struct Traced {
    pub name: String,
    pub tensor: Tensor,
}

impl Traced {
    /// Per-sample `(C, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.tensor.dims();
        (d[1], d[2], d[3])
    }
}

#[derive(Default)]
struct Trace(Option<Vec<Traced>>);

impl Trace {
    fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        if let Some(v) = &mut self.0 {
            v.push(Traced {
                name: name.into(),
                tensor: t.clone(),
            });
        }
    }
}

/// conv3x3 → IN → ReLU → conv3x3 added onto the input.
pub(crate) struct ResBlock {
    conv1: Conv2d,
    norm: InstanceNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let cfg = ConvConfig::new(3, 1, 1);
        Ok(Self {
            conv1: Conv2d::new(&pb.pp("conv1"), channels, channels, cfg)?,
            norm: InstanceNorm::new(&pb.pp("norm"), channels)?,
            conv2: Conv2d::new(&pb.pp("conv2"), channels, channels, cfg)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.conv1.forward(x, mode)?;
        let h = self.norm.forward(&h)?.relu()?;
        let h = self.conv2.forward(&h, mode)?;
        Ok((x + h)?)
    }
}

#[derive(Clone, Copy)]
enum Resample {
    Down,
    Up,
}

/// Residual block that halves or doubles the resolution, with a learned 1x1
/// projection on the shortcut.
struct ResampleBlock {
    kind: Resample,
    conv1: Conv2d,
    norm: InstanceNorm,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl ResampleBlock {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, kind: Resample) -> Result<Self> {
        let stride = match kind {
            Resample::Down => 2,
            Resample::Up => 1,
        };
        Ok(Self {
            kind,
            conv1: Conv2d::new(&pb.pp("conv1"), c_in, c_out, ConvConfig::new(3, stride, 1))?,
            norm: InstanceNorm::new(&pb.pp("norm"), c_out)?,
            conv2: Conv2d::new(&pb.pp("conv2"), c_out, c_out, ConvConfig::new(3, 1, 1))?,
            shortcut: Conv2d::new(&pb.pp("shortcut"), c_in, c_out, ConvConfig::new(1, 1, 0))?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self.kind {
            Resample::Down => {
                let main = self.conv1.forward(x, mode)?;
                let main = self.norm.forward(&main)?.relu()?;
                let main = self.conv2.forward(&main, mode)?;
                let skip = self.shortcut.forward(&x.avg_pool2d(2)?, mode)?;
                Ok((main + skip)?)
            }
            Resample::Up => {
                let up = upsample2(x)?;
                let main = self.conv1.forward(&up, mode)?;
                let main = self.norm.forward(&main)?.relu()?;
                let main = self.conv2.forward(&main, mode)?;
                let skip = self.shortcut.forward(&up, mode)?;
                Ok((main + skip)?)
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling by broadcasting.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// Encoder output: the bottleneck plus `[enc1, enc2, enc3]` skip tensors.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub bottleneck: Tensor,
    pub skips: Vec<Tensor>,
}

pub struct Generator {
    cfg: GeneratorConfig,
    stem: Conv2d,
    stem_norm: InstanceNorm,
    down: Vec<(ResampleBlock, InstanceNorm)>,
    bottleneck: Vec<ResBlock>,
    up1: (ResampleBlock, InstanceNorm),
    attention: NonLocal,
    up2: (ResampleBlock, InstanceNorm),
    up3: (ResampleBlock, InstanceNorm),
    out: Conv2d,
}

impl Generator {
    pub fn new(pb: &ParamBuilder, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let enc = pb.pp("enc");
        let dec = pb.pp("dec");
        let mut down = Vec::with_capacity(3);
        for (i, (c_in, c_out)) in [(b, 2 * b), (2 * b, 4 * b), (4 * b, 8 * b)].into_iter().enumerate() {
            let p = enc.pp(format!("down{}", i + 1));
            down.push((
                ResampleBlock::new(&p, c_in, c_out, Resample::Down)?,
                InstanceNorm::new(&p.pp("out_norm"), c_out)?,
            ));
        }
        let bottleneck = (0..cfg.bottleneck_blocks)
            .map(|i| ResBlock::new(&enc.pp(format!("res{i}")), 8 * b))
            .collect::<Result<Vec<_>>>()?;
        let up = |name: &str, c_in, c_out| -> Result<(ResampleBlock, InstanceNorm)> {
            let p = dec.pp(name);
            Ok((
                ResampleBlock::new(&p, c_in, c_out, Resample::Up)?,
                InstanceNorm::new(&p.pp("out_norm"), c_out)?,
            ))
        };
        Ok(Self {
            cfg,
            stem: Conv2d::new(&enc.pp("stem"), 3, b, ConvConfig::new(3, 1, 1))?,
            stem_norm: InstanceNorm::new(&enc.pp("stem_norm"), b)?,
            down,
            bottleneck,
            // bottleneck ++ enc3
            up1: up("up1", 16 * b, 4 * b)?,
            // up1 ++ enc2
            attention: NonLocal::new(&dec.pp("attention"), 8 * b)?,
            up2: up("up2", 8 * b, 2 * b)?,
            // up2 ++ enc1
            up3: up("up3", 4 * b, 2 * b)?,
            out: Conv2d::new(&dec.pp("out"), 2 * b, 3, ConvConfig::new(3, 1, 1).plain())?,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = x.dims();
        if d.len() != 4 || d[1] != 3 || d[2] != self.cfg.height || d[3] != self.cfg.width {
            return Err(Error::shape(
                "generator input",
                ("N", 3, self.cfg.height, self.cfg.width),
                d,
            ));
        }
        Ok(())
    }

    fn encode_inner(&self, x: &Tensor, mode: Mode, trace: &mut Trace) -> Result<Encoded> {
        self.check_input(x)?;
        let mut h = self.stem_norm.forward(&self.stem.forward(x, mode)?)?;
        trace.push("stem", &h);
        let mut skips = Vec::with_capacity(3);
        for (i, (block, norm)) in self.down.iter().enumerate() {
            h = norm.forward(&block.forward(&h, mode)?)?;
            trace.push(format!("enc{}", i + 1), &h);
            skips.push(h.clone());
        }
        for (i, block) in self.bottleneck.iter().enumerate() {
            trace.push(format!("res{i}.input"), &h);
            h = block.forward(&h, mode)?;
        }
        trace.push("bottleneck", &h);
        Ok(Encoded { bottleneck: h, skips })
    }

    fn decode_inner(&self, enc: &Encoded, mode: Mode, trace: &mut Trace) -> Result<Tensor> {
        let (c, hb, wb) = self.cfg.bottleneck_shape();
        let n = enc.bottleneck.dim(0)?;
        let b = self.cfg.base_channels;
        if enc.bottleneck.dims() != [n, c, hb, wb] {
            return Err(Error::shape("decoder bottleneck", [n, c, hb, wb], enc.bottleneck.dims()));
        }
        let expected = [
            [n, 2 * b, 4 * hb, 4 * wb],
            [n, 4 * b, 2 * hb, 2 * wb],
            [n, 8 * b, hb, wb],
        ];
        if enc.skips.len() != 3 {
            return Err(Error::shape("decoder skips", 3, enc.skips.len()));
        }
        for (skip, want) in enc.skips.iter().zip(expected.iter()) {
            if skip.dims() != want {
                return Err(Error::shape("decoder skip", want, skip.dims()));
            }
        }

        let h = Tensor::cat(&[&enc.bottleneck, &enc.skips[2]], 1)?;
        let h = self.up1.1.forward(&self.up1.0.forward(&h, mode)?)?;
        trace.push("up1", &h);
        let h = Tensor::cat(&[&h, &enc.skips[1]], 1)?;
        let h = self.attention.forward(&h, mode)?;
        trace.push("attention", &h);
        let h = self.up2.1.forward(&self.up2.0.forward(&h, mode)?)?;
        trace.push("up2", &h);
        let h = Tensor::cat(&[&h, &enc.skips[0]], 1)?;
        let h = self.up3.1.forward(&self.up3.0.forward(&h, mode)?)?;
        trace.push("up3", &h);
        let out = self.out.forward(&h, mode)?.tanh()?;
        trace.push("output", &out);
        Ok(out)
    }

    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<Encoded> {
        self.encode_inner(x, mode, &mut Trace::default())
    }

    pub fn decode(&self, enc: &Encoded, mode: Mode) -> Result<Tensor> {
        self.decode_inner(enc, mode, &mut Trace::default())
    }

    /// Returns `(generated street, bottleneck)` from a single pass.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let enc = self.encode(x, mode)?;
        let out = self.decode(&enc, mode)?;
        Ok((out, enc.bottleneck))
    }

    /// Full pass that also records every stage's activation.
    pub fn forward_traced(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Traced>)> {
        let mut trace = Trace(Some(Vec::new()));
        let enc = self.encode_inner(x, mode, &mut trace)?;
        let out = self.decode_inner(&enc, mode, &mut trace)?;
        Ok((out, trace.0.unwrap_or_default()))
    }
}
