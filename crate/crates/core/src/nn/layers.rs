use candle_core::{DType, Tensor, D};

use super::params::{Buffer, ParamBuilder};
use crate::error::{Error, Result};

/// Whether stateful layers may advance their internal estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const SN_EPS: f64 = 1e-12;

/// Divides a weight by a running estimate of its largest singular value.
///
/// The estimate comes from one power-iteration step per training-mode
/// forward pass, with the left singular vector persisted between passes.
pub struct SpectralNorm {
    u: Buffer,
}

impl SpectralNorm {
    pub fn new(pb: &ParamBuilder, rows: usize) -> Result<Self> {
        Ok(Self {
            u: pb.unit_buffer("sn_u", rows)?,
        })
    }

    pub fn u(&self) -> Tensor {
        self.u.read().unwrap().clone()
    }

    /// Returns `(normalized weight, sigma estimate)`.
    pub fn apply(&self, weight: &Tensor, mode: Mode) -> Result<(Tensor, f64)> {
        let rows = weight.dim(0)?;
        let mat = weight.reshape((rows, ()))?;
        let w = mat.detach();
        let mut u = self.u.read().unwrap().unsqueeze(1)?;

        let v = l2_normalize_col(&w.t()?.matmul(&u)?)?;
        if mode == Mode::Train {
            let next = w.matmul(&v)?;
            if l2(&next)? > SN_EPS {
                u = l2_normalize_col(&next)?;
                *self.u.write().unwrap() = u.squeeze(1)?;
            }
        }
        let sigma = u.t()?.matmul(&mat)?.matmul(&v)?.reshape(())?;
        let sigma_val = sigma.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let sigma = sigma.maximum(SN_EPS)?;
        Ok((weight.broadcast_div(&sigma)?, sigma_val))
    }
}

fn l2(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?)
}

fn l2_normalize_col(t: &Tensor) -> Result<Tensor> {
    let n = l2(t)?;
    Ok(t.affine(1.0 / (n + SN_EPS), 0.0)?)
}

/// Zero padding `(top, bottom, left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const fn same(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub bias: bool,
    pub spectral_norm: bool,
}

impl ConvConfig {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: Padding::same(padding),
            bias: true,
            spectral_norm: true,
        }
    }

    pub const fn plain(mut self) -> Self {
        self.spectral_norm = false;
        self
    }

    pub const fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }
}

pub struct Conv2d {
    weight: candle_core::Var,
    bias: Option<candle_core::Var>,
    sn: Option<SpectralNorm>,
    cfg: ConvConfig,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, cfg: ConvConfig) -> Result<Self> {
        let weight = pb.normal("weight", &[c_out, c_in, cfg.kernel, cfg.kernel])?;
        let bias = if cfg.bias {
            Some(pb.zeros("bias", &[c_out])?)
        } else {
            None
        };
        let sn = if cfg.spectral_norm {
            Some(SpectralNorm::new(pb, c_out)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            sn,
            cfg,
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// The weight actually used by `forward` in eval mode.
    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => Ok(sn.apply(self.weight.as_tensor(), Mode::Eval)?.0),
            None => Ok(self.weight.as_tensor().clone()),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = match &self.sn {
            Some(sn) => sn.apply(self.weight.as_tensor(), mode)?.0,
            None => self.weight.as_tensor().clone(),
        };
        let y = super::im2col::conv2d(x, &w, self.cfg.stride, self.cfg.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-sample, per-channel normalization over the spatial axes, with affine.
pub struct InstanceNorm {
    gamma: candle_core::Var,
    beta: candle_core::Var,
}

const IN_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.ones("gamma", &[channels])?,
            beta: pb.zeros("beta", &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n, c, h * w))?;
        let mean = flat.mean_keepdim(2)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + IN_EPS)?.sqrt()?)?;
        let gamma = self.gamma.as_tensor().reshape((1, c, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1))?;
        Ok(normed
            .broadcast_mul(&gamma)?
            .broadcast_add(&beta)?
            .reshape((n, c, h, w))?)
    }
}

pub struct Linear {
    weight: candle_core::Var,
    bias: candle_core::Var,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.normal("weight", &[d_out, d_in])?,
            bias: pb.zeros("bias", &[d_out])?,
        })
    }

    pub fn weight(&self) -> &candle_core::Var {
        &self.weight
    }

    pub fn bias(&self) -> &candle_core::Var {
        &self.bias
    }

    /// `(N, d_in) -> (N, d_out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Embedded-Gaussian self-attention over all spatial positions, added back
/// onto the input through a learned gate that starts at zero.
pub struct NonLocal {
    theta: Conv2d,
    phi: Conv2d,
    g: Conv2d,
    out: Conv2d,
    gate: candle_core::Var,
    inter: usize,
}

impl NonLocal {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let inter = (channels / 2).max(1);
        let cfg = ConvConfig::new(1, 1, 0);
        Ok(Self {
            theta: Conv2d::new(&pb.pp("theta"), channels, inter, cfg)?,
            phi: Conv2d::new(&pb.pp("phi"), channels, inter, cfg)?,
            g: Conv2d::new(&pb.pp("g"), channels, inter, cfg)?,
            out: Conv2d::new(&pb.pp("out"), inter, channels, cfg)?,
            gate: pb.zeros("gate", &[1])?,
            inter,
        })
    }

    pub fn gate(&self) -> &candle_core::Var {
        &self.gate
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, _c, h, w) = x.dims4()?;
        let hw = h * w;
        let theta = self
            .theta
            .forward(x, mode)?
            .reshape((n, self.inter, hw))?
            .transpose(1, 2)?
            .contiguous()?;
        let phi = self.phi.forward(x, mode)?.reshape((n, self.inter, hw))?;
        let g = self
            .g
            .forward(x, mode)?
            .reshape((n, self.inter, hw))?
            .transpose(1, 2)?
            .contiguous()?;
        let attn = softmax_last(&theta.matmul(&phi)?)?;
        let y = attn
            .matmul(&g)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, self.inter, h, w))?;
        let z = self.out.forward(&y, mode)?;
        Ok(x.broadcast_add(&z.broadcast_mul(self.gate.as_tensor())?)?)
    }
}

/// Softmax over the last axis with an analytic backward pass.
struct SoftmaxLast;

fn softmax_rows<T: num_traits::Float>(x: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        dst.iter_mut().for_each(|o| *o = *o / sum);
    }
    out
}

impl candle_core::CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let d = *layout.dims().last().unwrap_or(&1);
        let Some((a, b)) = layout.contiguous_offsets() else {
            candle_core::bail!("softmax requires a contiguous input")
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[a..b], d)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[a..b], d)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad.broadcast_sub(&dot)?)?))
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - x.neg()?.relu()?.affine(slope, 0.0)?)?)
}

pub fn expect_dims(context: &'static str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.dims() != expected {
        return Err(Error::shape(context, expected, t.dims()));
    }
    Ok(())
}
