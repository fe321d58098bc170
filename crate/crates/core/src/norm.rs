//! Normalization with a hand-written backward pass.
//!
//! Group and layer normalization both normalize contiguous chunks of the
//! flattened input and then apply a per-channel affine map; [`ChunkNorm`]
//! covers both, which keeps each norm a single graph node instead of a
//! dozen elementwise ops.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

/// Chunks of `chunk` elements are normalized; the affine channel of flat
/// index `i` is `(i / inner) % channels`.
#[derive(Debug, Clone, Copy)]
struct ChunkNorm {
    chunk: usize,
    inner: usize,
    channels: usize,
    eps: f64,
}

/// Per-chunk mean and reciprocal standard deviation.
fn chunk_stats<T: WithDType>(x: &[T], chunk: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks(chunk)
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.iter().map(|v| v.to_f64()).sum::<f64>() / n;
            let var = c.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

impl ChunkNorm {
    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let stats = chunk_stats(x, self.chunk, self.eps);
        let mut out = Vec::with_capacity(x.len());
        for (i, v) in x.iter().enumerate() {
            let (mean, rstd) = stats[i / self.chunk];
            let ch = (i / self.inner) % self.channels;
            let y = (v.to_f64() - mean) * rstd * gamma[ch].to_f64() + beta[ch].to_f64();
            out.push(T::from_f64(y));
        }
        out
    }

    /// Returns `(dx, dgamma, dbeta)`.
    fn backward<T: WithDType>(&self, x: &[T], gamma: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let stats = chunk_stats(x, self.chunk, self.eps);
        let mut dgamma = vec![0f64; self.channels];
        let mut dbeta = vec![0f64; self.channels];
        let mut dx = Vec::with_capacity(x.len());
        let n = self.chunk as f64;
        for (k, (xc, gc)) in x.chunks(self.chunk).zip(grad.chunks(self.chunk)).enumerate() {
            let (mean, rstd) = stats[k];
            let base = k * self.chunk;
            // dxhat = g * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for (j, (v, g)) in xc.iter().zip(gc).enumerate() {
                let ch = ((base + j) / self.inner) % self.channels;
                let xhat = (v.to_f64() - mean) * rstd;
                let g = g.to_f64();
                dgamma[ch] += g * xhat;
                dbeta[ch] += g;
                let d = g * gamma[ch].to_f64();
                sum_d += d;
                sum_dx += d * xhat;
            }
            let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
            for (j, (v, g)) in xc.iter().zip(gc).enumerate() {
                let ch = ((base + j) / self.inner) % self.channels;
                let xhat = (v.to_f64() - mean) * rstd;
                let d = g.to_f64() * gamma[ch].to_f64();
                dx.push(T::from_f64(rstd * (d - mean_d - xhat * mean_dx)));
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
        (dx, cast(dgamma), cast(dbeta))
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("norm expects contiguous tensors"),
    }
}

impl CustomOp3 for ChunkNorm {
    fn name(&self) -> &'static str {
        "chunk-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?))
            }
            _ => candle_core::bail!("norm supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: WithDType>(
            op: &ChunkNorm,
            x: &Tensor,
            gamma: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
            let xv = x.flatten_all()?.to_vec1::<T>()?;
            let gv = gamma.to_vec1::<T>()?;
            let dv = grad.flatten_all()?.to_vec1::<T>()?;
            let (dx, dg, db) = op.backward(&xv, &gv, &dv);
            let dev = x.device();
            Ok((
                Tensor::from_vec(dx, x.shape(), dev)?,
                Tensor::from_vec(dg, gamma.shape(), dev)?,
                Tensor::from_vec(db, gamma.shape(), dev)?,
            ))
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run::<f32>(self, x, gamma, grad)?,
            DType::F64 => run::<f64>(self, x, gamma, grad)?,
            dt => candle_core::bail!("norm does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Group normalization of a `(B, C, H, W)` tensor with per-channel affine.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if c % groups != 0 {
        candle_core::bail!("{c} channels do not split into {groups} groups");
    }
    let op = ChunkNorm {
        chunk: c / groups * h * w,
        inner: h * w,
        channels: c,
        eps,
    };
    x.contiguous()?.apply_op3(gamma, beta, op)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let d = x.dim(candle_core::D::Minus1)?;
    let op = ChunkNorm {
        chunk: d,
        inner: 1,
        channels: d,
        eps,
    };
    x.contiguous()?.apply_op3(gamma, beta, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn reference_group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        let g = x.reshape((b, groups, c / groups * h * w)).unwrap();
        let mean = g.mean_keepdim(D::Minus1).unwrap();
        let centered = g.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let normed = centered
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .reshape((b, c, h, w))
            .unwrap();
        normed
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn group_norm_matches_composed_ops_with_gradients() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0.5f64, 2.0, (2, 6, 3, 4), &dev).unwrap()).unwrap();
        let gamma = Var::from_tensor(&Tensor::randn(1f64, 0.3, 6, &dev).unwrap()).unwrap();
        let beta = Var::from_tensor(&Tensor::randn(0f64, 0.3, 6, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 6, 3, 4), &dev).unwrap();
        let ours = group_norm(&x, 3, &gamma, &beta, 1e-5).unwrap();
        let reference = reference_group_norm(&x, 3, &gamma, &beta);
        assert!(max_diff(&ours, &reference) < 1e-12);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [x.as_tensor(), gamma.as_tensor(), beta.as_tensor()] {
            assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let dev = Device::Cpu;
        let x = Tensor::randn(3f64, 2.0, (4, 5, 8), &dev).unwrap();
        let ones = Tensor::ones(8, DType::F64, &dev).unwrap();
        let zeros = Tensor::zeros(8, DType::F64, &dev).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        let mean = y.mean(D::Minus1).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        let var = y.sqr().unwrap().mean(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mean < 1e-12);
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-4));
    }
}
