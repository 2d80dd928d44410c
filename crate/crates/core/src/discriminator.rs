//! PatchGAN critic over (polar satellite, street) pairs.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::generator::Traced;
use crate::nn::layers::leaky_relu;
use crate::nn::{Conv2d, ConvConfig, Mode, NonLocal, Padding, ParamBuilder};

const SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64 }
    }
}

pub struct Discriminator {
    convs: Vec<Conv2d>,
    attention: NonLocal,
}

impl Discriminator {
    pub fn new(pb: &ParamBuilder, cfg: DiscriminatorConfig) -> Result<Self> {
        let b = cfg.base_channels;
        if b == 0 {
            return Err(Error::Config("discriminator base_channels must be > 0".into()));
        }
        // Stride-1 layers keep the height with a (1, 2) split and trim one
        // column each.
        let keep_height = Padding {
            top: 1,
            bottom: 2,
            left: 1,
            right: 1,
        };
        let layers = [
            (6, b, ConvConfig::new(4, 2, 1)),
            (b, 2 * b, ConvConfig::new(4, 2, 1)),
            (2 * b, 4 * b, ConvConfig::new(4, 2, 1)),
            (4 * b, 8 * b, ConvConfig::new(4, 1, 0).with_padding(keep_height)),
            (8 * b, 1, ConvConfig::new(4, 1, 0).with_padding(keep_height).plain()),
        ];
        let convs = layers
            .into_iter()
            .enumerate()
            .map(|(i, (c_in, c_out, cfg))| Conv2d::new(&pb.pp(format!("conv{}", i + 1)), c_in, c_out, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            attention: NonLocal::new(&pb.pp("attention"), 2 * b)?,
        })
    }

    fn run(&self, condition: &Tensor, street: &Tensor, mode: Mode, mut trace: Option<&mut Vec<Traced>>) -> Result<Tensor> {
        if condition.dims() != street.dims() || condition.rank() != 4 || condition.dim(1)? != 3 {
            return Err(Error::shape("discriminator inputs", condition.dims(), street.dims()));
        }
        let mut h = Tensor::cat(&[condition, street], 1)?;
        let mut record = |name: &str, t: &Tensor| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(Traced {
                    name: name.to_string(),
                    tensor: t.clone(),
                });
            }
        };
        record("input", &h);
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h, mode)?;
            if i < 4 {
                h = leaky_relu(&h, SLOPE)?;
            }
            record(&format!("conv{}", i + 1), &h);
            if i == 1 {
                h = self.attention.forward(&h, mode)?;
                record("attention", &h);
            }
        }
        Ok(h)
    }

    /// Raw per-patch logits `(N, 1, h, w)`.
    pub fn score(&self, condition: &Tensor, street: &Tensor, mode: Mode) -> Result<Tensor> {
        self.run(condition, street, mode, None)
    }

    pub fn score_traced(&self, condition: &Tensor, street: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Traced>)> {
        let mut trace = Vec::new();
        let out = self.run(condition, street, mode, Some(&mut trace))?;
        Ok((out, trace))
    }
}
