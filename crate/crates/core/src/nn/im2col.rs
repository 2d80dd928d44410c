//! Patch extraction for convolution as a matrix product. The backward pass
//! scatters patch gradients back onto the image.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use super::layers::Padding;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: Padding,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(dims: &[usize], k: usize, stride: usize, pad: Padding) -> candle_core::Result<Self> {
        let &[n, c, h, w] = dims else {
            candle_core::bail!("im2col expects a rank-4 input, got {dims:?}")
        };
        let (hp, wp) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        if hp < k || wp < k || stride == 0 {
            candle_core::bail!("im2col: kernel {k} does not fit padded input {hp}x{wp}")
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (hp - k) / stride + 1,
            wo: (wp - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox·s + kx - left` lies inside the image.
    fn valid_range(out: usize, inp: usize, s: usize, k_off: usize, pad: usize) -> std::ops::Range<usize> {
        // ox·s + k_off >= pad  and  ox·s + k_off < inp + pad
        let lo = pad.saturating_sub(k_off).div_ceil(s);
        let hi = if inp + pad > k_off { (inp + pad - k_off).div_ceil(s) } else { 0 };
        lo.min(out)..hi.min(out).max(lo.min(out))
    }

    /// Calls `f(dst_offset, src_offset, len, src_step)` for every contiguous
    /// run of patch entries that lies inside the image. Destination layout is
    /// `(C·k·k, N, Ho·Wo)`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (k, s) = (self.k, self.stride);
        let l = self.cols();
        for b in 0..self.n {
            for ch in 0..self.c {
                let plane = (b * self.c + ch) * self.h * self.w;
                for ky in 0..k {
                    let rows = Self::valid_range(self.ho, self.h, s, ky, self.pad.top);
                    for kx in 0..k {
                        let cols = Self::valid_range(self.wo, self.w, s, kx, self.pad.left);
                        if cols.is_empty() {
                            continue;
                        }
                        let dst_row = (((ch * k + ky) * k + kx) * self.n + b) * l;
                        for oy in rows.clone() {
                            let iy = oy * s + ky - self.pad.top;
                            let ix = cols.start * s + kx - self.pad.left;
                            f(dst_row + oy * self.wo + cols.start, plane + iy * self.w + ix, cols.len(), s);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("im2col requires a contiguous input"),
    }
}

fn gather<T: WithDType>(g: &Geometry, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.patch_len() * g.cols()];
    g.for_each_run(|dst, src, len, step| {
        let d = &mut out[dst..dst + len];
        if step == 1 {
            d.copy_from_slice(&x[src..src + len]);
        } else {
            d.iter_mut().enumerate().for_each(|(i, v)| *v = x[src + i * step]);
        }
    });
    out
}

fn scatter<T: WithDType + AddAssign>(g: &Geometry, cols: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    g.for_each_run(|dst, src, len, step| {
        for (i, &v) in cols[dst..dst + len].iter().enumerate() {
            out[src + i * step] += v;
        }
    });
    out
}

/// `(N, C, H, W) -> (C·k·k, N·Ho·Wo)`, patch entries ordered `(c, ky, kx)`.
pub struct Im2Col {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(layout.dims(), self.kernel, self.stride, self.padding)?;
        let shape = Shape::from((g.patch_len(), g.n * g.cols()));
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(gather(&g, contiguous(s, layout)?)),
            CpuStorage::F64(s) => CpuStorage::F64(gather(&g, contiguous(s, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = Geometry::new(arg.dims(), self.kernel, self.stride, self.padding)?;
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(g))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.n, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(scatter(g, contiguous(s, layout)?)),
            CpuStorage::F64(s) => CpuStorage::F64(scatter(g, contiguous(s, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}

/// Cross-correlation of `x (N, C, H, W)` with `w (O, C, k, k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: Padding) -> candle_core::Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, k, k2) = w.dims4()?;
    if wc != c || k != k2 {
        candle_core::bail!("conv2d: weight {:?} does not match input {:?}", w.dims(), x.dims())
    }
    if k == 1 && stride == 1 && padding == Padding::same(0) {
        let y = w.reshape((o, c))?.broadcast_matmul(&x.reshape((n, c, h * wd))?)?;
        return y.reshape((n, o, h, wd));
    }
    let g = Geometry::new(x.dims(), k, stride, padding)?;
    let cols = x.contiguous()?.apply_op1(Im2Col {
        kernel: k,
        stride,
        padding,
    })?;
    let y = w.reshape((o, c * k * k))?.matmul(&cols)?;
    y.reshape((o, n, g.ho, g.wo))?.transpose(0, 1)?.contiguous()
}
