use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{grid_sample, identity_grid};
use crate::error::Result;

/// Random affine + thin-plate deformation `T(z)` with a closed form.
///
/// `T(z) = A z + t + sum_j c_j u(|z - q_j|_1) * (1, 1)` with
/// `u(r) = r^2 log(r + 1e-6)` and control points `q_j` on a regular grid.
/// Applying it to an image means sampling the image at `T(z)`.
#[derive(Debug, Clone)]
pub struct RandomTransform {
    /// `(B, 2, 3)` affine part.
    theta: Vec<[f64; 6]>,
    /// `(P, 2)` control points.
    control_points: Vec<[f64; 2]>,
    /// `(B, P)` TPS weights.
    control_params: Vec<Vec<f64>>,
}

const TPS_EPS: f64 = 1e-6;

impl RandomTransform {
    pub fn sample<R: Rng>(
        rng: &mut R,
        batch: usize,
        sigma_affine: f64,
        sigma_tps: f64,
        points: usize,
    ) -> Self {
        let normal = |s: f64| Normal::new(0.0, s.max(0.0)).expect("valid std");
        let na = normal(sigma_affine);
        let nt = normal(sigma_tps);
        let theta = (0..batch)
            .map(|_| {
                let mut t = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
                for v in t.iter_mut() {
                    *v += na.sample(rng);
                }
                t
            })
            .collect();
        let control_points = control_grid(points);
        let control_params = (0..batch)
            .map(|_| (0..control_points.len()).map(|_| nt.sample(rng)).collect())
            .collect();
        Self {
            theta,
            control_points,
            control_params,
        }
    }

    /// Pure affine transform `T(z) = A z + t` per batch element.
    pub fn affine(theta: Vec<[f64; 6]>) -> Self {
        let batch = theta.len();
        Self {
            theta,
            control_points: Vec::new(),
            control_params: vec![Vec::new(); batch],
        }
    }

    pub fn identity(batch: usize) -> Self {
        Self::affine(vec![[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; batch])
    }

    pub fn batch(&self) -> usize {
        self.theta.len()
    }

    fn theta_tensor(&self, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let b = self.batch();
        let lin: Vec<f64> = self
            .theta
            .iter()
            .flat_map(|t| [t[0], t[1], t[3], t[4]])
            .collect();
        let shift: Vec<f64> = self.theta.iter().flat_map(|t| [t[2], t[5]]).collect();
        Ok((
            Tensor::from_vec(lin, (b, 2, 2), device)?.to_dtype(dtype)?,
            Tensor::from_vec(shift, (b, 1, 2), device)?.to_dtype(dtype)?,
        ))
    }

    /// Applies `T` to coordinates `(B, N, 2)`; differentiable in `coords`.
    pub fn warp_coordinates(&self, coords: &Tensor) -> Result<Tensor> {
        let (b, n, _) = coords.dims3()?;
        let (dtype, device) = (coords.dtype(), coords.device());
        let (lin, shift) = self.theta_tensor(dtype, device)?;
        let mut out = coords
            .matmul(&lin.transpose(1, 2)?.contiguous()?)?
            .broadcast_add(&shift)?;
        let p = self.control_points.len();
        if p > 0 {
            let cp: Vec<f64> = self.control_points.iter().flatten().copied().collect();
            let cp = Tensor::from_vec(cp, (1, 1, p, 2), device)?.to_dtype(dtype)?;
            let params: Vec<f64> = self.control_params.iter().flatten().copied().collect();
            let params = Tensor::from_vec(params, (b, 1, p), device)?.to_dtype(dtype)?;
            let dist = coords
                .reshape((b, n, 1, 2))?
                .broadcast_sub(&cp)?
                .abs()?
                .sum(3)?;
            let u = (dist.sqr()? * (&dist + TPS_EPS)?.log()?)?;
            let tps = u.broadcast_mul(&params)?.sum_keepdim(2)?; // (B, N, 1)
            out = out.broadcast_add(&tps)?;
        }
        Ok(out)
    }

    /// Analytic Jacobian of `T` at coordinates `(B, N, 2)`, shape `(B, N, 2, 2)`.
    pub fn jacobian(&self, coords: &Tensor) -> Result<Tensor> {
        let (b, n, _) = coords.dims3()?;
        let host = crate::nn::to_vec_f64(coords)?;
        let mut out = Vec::with_capacity(b * n * 4);
        for bi in 0..b {
            let t = &self.theta[bi];
            for ni in 0..n {
                let x = host[(bi * n + ni) * 2];
                let y = host[(bi * n + ni) * 2 + 1];
                let (mut gx, mut gy) = (0.0, 0.0);
                for (q, c) in self.control_points.iter().zip(&self.control_params[bi]) {
                    let r = (x - q[0]).abs() + (y - q[1]).abs();
                    let du = 2.0 * r * (r + TPS_EPS).ln() + r * r / (r + TPS_EPS);
                    gx += c * du * sign(x - q[0]);
                    gy += c * du * sign(y - q[1]);
                }
                out.extend([t[0] + gx, t[1] + gy, t[3] + gx, t[4] + gy]);
            }
        }
        Ok(Tensor::from_vec(out, (b, n, 2, 2), coords.device())?.to_dtype(coords.dtype())?)
    }

    /// Samples `image` (`B x C x H x W`) at `T(z)` for every output pixel `z`.
    pub fn transform_image(&self, image: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = image.dims4()?;
        let grid = identity_grid(h, w, image.dtype(), image.device())?
            .reshape((1, h * w, 2))?
            .repeat((b, 1, 1))?;
        let warped = self.warp_coordinates(&grid)?.reshape((b, h, w, 2))?;
        grid_sample(image, &warped)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn control_grid(points: usize) -> Vec<[f64; 2]> {
    if points < 2 {
        return vec![[0.0, 0.0]; points * points];
    }
    let step = 2.0 / (points - 1) as f64;
    let mut out = Vec::with_capacity(points * points);
    for i in 0..points {
        for j in 0..points {
            out.push([-1.0 + j as f64 * step, -1.0 + i as f64 * step]);
        }
    }
    out
}
