//! Convolutions lowered to a single matrix product.
//!
//! The input is unfolded into a `(C*k*k, B*Ho*Wo)` column matrix and
//! multiplied by the flattened weight. Forward and backward are each one
//! graph node with hand-written gradients (two matmuls plus a fold), which is
//! far cheaper on CPU than the generic convolution backward and avoids
//! materializing gradients of the column matrix in the autograd store.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

/// Unfolding geometry: image `(B, C, H, W)`, kernel `k`, stride, zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unfold {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Unfold {
    pub fn out_hw(&self) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(self.height), f(self.width))
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.batch * ho * wo
    }

    /// Visits every run of in-image taps as `(column start, image start, len)`;
    /// consecutive column entries read image entries `stride` apart.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (h, w, k, s, p) = (self.height, self.width, self.kernel, self.stride, self.padding);
        let cols = self.cols();
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    // ox range with 0 <= ox * s + kx - p < w
                    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
                    let hi = if w + p > kx { (w + p - kx).div_ceil(s).min(wo) } else { 0 };
                    if lo >= hi {
                        continue;
                    }
                    for b in 0..self.batch {
                        let img = (b * self.channels + c) * h * w;
                        let base = row * cols + b * ho * wo;
                        for oy in 0..ho {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let line = img + (iy - p) * w;
                            f(base + oy * wo + lo, line + lo * s + kx - p, hi - lo);
                        }
                    }
                }
            }
        }
    }

    /// Column matrix, followed by `ones_rows` rows of ones.
    pub fn unfold<T: WithDType>(&self, x: &[T], ones_rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); (self.rows() + ones_rows) * self.cols()];
        out[self.rows() * self.cols()..].fill(T::one());
        let s = self.stride;
        self.for_each_run(|o, i, n| {
            if s == 1 {
                out[o..o + n].copy_from_slice(&x[i..i + n]);
            } else {
                for (dst, src) in out[o..o + n].iter_mut().zip(x[i..].iter().step_by(s)) {
                    *dst = *src;
                }
            }
        });
        out
    }

    /// Adjoint of [`Self::unfold`]: scatter-adds the first `rows()` rows.
    pub fn fold<T: WithDType>(&self, col: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.batch * self.channels * self.height * self.width];
        let s = self.stride;
        self.for_each_run(|o, i, n| {
            for (src, dst) in col[o..o + n].iter().zip(out[i..].iter_mut().step_by(s)) {
                *dst += *src;
            }
        });
        out
    }
}

/// `(B, C, P)` to `(C, B, P)`.
fn swap_leading<T: Copy>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ci in 0..c {
        for bi in 0..b {
            let at = (bi * c + ci) * p;
            out.extend_from_slice(&x[at..at + p]);
        }
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("convolution expects contiguous inputs"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn matrix<T: WithDType>(data: Vec<T>, rows: usize, cols: usize) -> candle_core::Result<Tensor> {
    Tensor::from_vec(data, (rows, cols), &candle_core::Device::Cpu)
}

/// `y = W [col; 1]` with `W` of shape `(O, C*k*k [+ 1])`.
#[derive(Debug, Clone, Copy)]
struct Conv {
    unfold: Unfold,
    out_channels: usize,
    bias: bool,
}

impl Conv {
    fn fwd<T: WithDType>(&self, x: &[T], w: &[T]) -> candle_core::Result<Vec<T>> {
        let u = &self.unfold;
        let extra = self.bias as usize;
        let col = matrix(u.unfold(x, extra), u.rows() + extra, u.cols())?;
        let w = matrix(w.to_vec(), self.out_channels, u.rows() + extra)?;
        let y = host::<T>(&w.matmul(&col)?)?;
        let (ho, wo) = u.out_hw();
        Ok(swap_leading(&y, self.out_channels, u.batch, ho * wo))
    }

    fn bwd<T: WithDType>(&self, x: &Tensor, w: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let u = &self.unfold;
        let extra = self.bias as usize;
        let (ho, wo) = u.out_hw();
        let o = self.out_channels;
        let grad = host::<T>(grad)?;
        let col = matrix(u.unfold(&host::<T>(x)?, extra), u.rows() + extra, u.cols())?;
        let g = matrix(swap_leading(&grad, u.batch, o, ho * wo), o, u.cols())?;
        let dw = col.matmul(&g.t()?)?.t()?.contiguous()?;
        let w = w.detach().narrow(1, 0, u.rows())?;
        let k = u.kernel;
        let dx = if u.stride == 1 && u.padding < k {
            // Stride 1: dx is the correlation of the output gradient with the
            // flipped, channel-transposed kernel. This keeps the matmul's
            // output small, unlike forming the full column gradient.
            let flipped = w
                .reshape((o, u.channels, k * k))?
                .flip(&[2])?
                .transpose(0, 1)?
                .contiguous()?
                .reshape((u.channels, o * k * k))?;
            let gu = Unfold {
                batch: u.batch,
                channels: o,
                height: ho,
                width: wo,
                kernel: k,
                stride: 1,
                padding: k - 1 - u.padding,
            };
            let gcol = matrix(gu.unfold(&grad, 0), gu.rows(), gu.cols())?;
            let dxm = host::<T>(&flipped.matmul(&gcol)?)?;
            swap_leading(&dxm, u.channels, u.batch, u.height * u.width)
        } else {
            u.fold(&host::<T>(&w.t()?.matmul(&g)?)?)
        };
        let dx = Tensor::from_vec(dx, (u.batch, u.channels, u.height, u.width), x.device())?;
        Ok((dx, dw))
    }
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (ho, wo) = self.unfold.out_hw();
        let shape = Shape::from((self.unfold.batch, self.out_channels, ho, wo));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(self.fwd(contiguous(x, l1)?, contiguous(w, l2)?)?),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(self.fwd(contiguous(x, l1)?, contiguous(w, l2)?)?),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (dx, dw) = match x.dtype() {
            DType::F32 => self.bwd::<f32>(x, w, grad)?,
            DType::F64 => self.bwd::<f64>(x, w, grad)?,
            dt => candle_core::bail!("conv2d does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dw)))
    }
}

/// `y = fold(W^T x)` with `W` of shape `(C_in, C_out*k*k)`; `unfold`
/// describes the output image.
#[derive(Debug, Clone, Copy)]
struct ConvTranspose {
    unfold: Unfold,
    in_channels: usize,
}

impl ConvTranspose {
    fn fwd<T: WithDType>(&self, x: &[T], w: &[T]) -> candle_core::Result<Vec<T>> {
        let u = &self.unfold;
        let (h, w_) = u.out_hw();
        let xm = matrix(swap_leading(x, u.batch, self.in_channels, h * w_), self.in_channels, u.cols())?;
        let w = matrix(w.to_vec(), self.in_channels, u.rows())?;
        Ok(u.fold(&host::<T>(&w.t()?.matmul(&xm)?)?))
    }

    fn bwd<T: WithDType>(&self, x: &Tensor, w: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let u = &self.unfold;
        let (h, w_) = u.out_hw();
        let gcol = matrix(u.unfold(&host::<T>(grad)?, 0), u.rows(), u.cols())?;
        let xm = matrix(swap_leading(&host::<T>(x)?, u.batch, self.in_channels, h * w_), self.in_channels, u.cols())?;
        let w = w.detach();
        let dxm = host::<T>(&w.matmul(&gcol)?)?;
        let dx = Tensor::from_vec(
            swap_leading(&dxm, self.in_channels, u.batch, h * w_),
            (u.batch, self.in_channels, h, w_),
            x.device(),
        )?;
        let dw = gcol.matmul(&xm.t()?)?.t()?.contiguous()?;
        Ok((dx, dw))
    }
}

impl CustomOp2 for ConvTranspose {
    fn name(&self) -> &'static str {
        "conv-transpose2d-im2col"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let u = &self.unfold;
        let shape = Shape::from((u.batch, u.channels, u.height, u.width));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(self.fwd(contiguous(x, l1)?, contiguous(w, l2)?)?),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(self.fwd(contiguous(x, l1)?, contiguous(w, l2)?)?),
            _ => candle_core::bail!("conv_transpose2d supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (dx, dw) = match x.dtype() {
            DType::F32 => self.bwd::<f32>(x, w, grad)?,
            DType::F64 => self.bwd::<f64>(x, w, grad)?,
            dt => candle_core::bail!("conv_transpose2d does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dw)))
    }
}

/// Cross-correlation with a `(O, C, k, k)` weight and optional `(O,)` bias,
/// zero padding.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let (o, c, k, _) = weight.dims4()?;
    let (b, xc, h, w) = x.dims4()?;
    if xc != c {
        candle_core::bail!("conv2d: input has {xc} channels, weight expects {c}");
    }
    let unfold = Unfold {
        batch: b,
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    let wm = weight.reshape((o, c * k * k))?;
    let wm = match bias {
        Some(bias) => Tensor::cat(&[&wm, &bias.reshape((o, 1))?], 1)?,
        None => wm,
    };
    let op = Conv {
        unfold,
        out_channels: o,
        bias: bias.is_some(),
    };
    x.contiguous()?.apply_op2(&wm.contiguous()?, op)
}

/// Transposed convolution with a `(C_in, C_out, k, k)` weight; the adjoint of
/// [`conv2d`] with the same geometry. Output side is `(H - 1) * s - 2p + k`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (ci, co, k, _) = weight.dims4()?;
    let (b, xc, h, w) = x.dims4()?;
    if xc != ci {
        candle_core::bail!("conv_transpose2d: input has {xc} channels, weight expects {ci}");
    }
    let f = |n: usize| (n - 1) * stride + k - 2 * padding;
    let unfold = Unfold {
        batch: b,
        channels: co,
        height: f(h),
        width: f(w),
        kernel: k,
        stride,
        padding,
    };
    let op = ConvTranspose {
        unfold,
        in_channels: ci,
    };
    x.contiguous()?.apply_op2(&weight.reshape((ci, co * k * k))?.contiguous()?, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_reference_convolutions() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 9, 8), &dev).unwrap();
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1), (5, 1, 2)] {
            let w = Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap();
            let bias = Tensor::randn(0f64, 1.0, 4, &dev).unwrap();
            let ours = conv2d(&x, &w, Some(&bias), s, p).unwrap();
            let reference = x
                .conv2d(&w, p, s, 1, 1)
                .unwrap()
                .broadcast_add(&bias.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert!(max_diff(&ours, &reference) < 1e-10, "k{k} s{s} p{p}");
        }
        let y = Tensor::randn(0f64, 1.0, (2, 4, 5, 6), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 3, 4, 4), &dev).unwrap();
        let ours = conv_transpose2d(&y, &w, 2, 1).unwrap();
        let reference = y.conv_transpose2d(&w, 1, 0, 2, 1).unwrap();
        assert_eq!(ours.dims(), &[2, 3, 10, 12]);
        assert!(max_diff(&ours, &reference) < 1e-10);
    }

    #[test]
    fn fold_is_the_adjoint_of_unfold() {
        // <unfold(x), c> == <x, fold(c)>
        let u = Unfold {
            batch: 2,
            channels: 2,
            height: 7,
            width: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..2 * 2 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..u.rows() * u.cols()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = u.unfold(&x, 0).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(u.fold(&c)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn gradients_match_reference_convolutions() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 6, 6), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (5, 3, 3, 3), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 5, &dev).unwrap()).unwrap();
        for (stride, pad) in [(2, 1), (1, 1), (1, 0)] {
            let reference = x
                .conv2d(&w, pad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            let probe = reference.randn_like(0.0, 1.0).unwrap();
            let g1 = (conv2d(&x, &w, Some(&b), stride, pad).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), w.as_tensor(), b.as_tensor()] {
                assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10, "s{stride} p{pad}");
            }
        }

        let wt = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 2, 4, 4), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 2, 12, 12), &dev).unwrap();
        let g1 = (conv_transpose2d(&x, &wt, 2, 1).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let g2 = (x.conv_transpose2d(&wt, 1, 0, 2, 1).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [x.as_tensor(), wt.as_tensor()] {
            assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
    }
}
