use candle_core::{Module, Tensor};

use super::keypoints::Hourglass;
use super::{grid_sample, identity_grid, keypoint_heatmaps, resize, FlowField, KeypointSet};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Padding, ParamStore};

/// Ridge added to `J^T J` when a driving Jacobian is (near) singular.
pub const RIDGE_EPS: f64 = 1e-4;
/// Jacobians with `|det| < SINGULAR_DET` take the ridge-regularized inverse.
pub const SINGULAR_DET: f64 = 1e-2;

/// Inverse of a stack of 2x2 matrices `(..., 2, 2)`.
///
/// Matrices with `|det| < SINGULAR_DET` get `(J^T J + eps I)^{-1} J^T`
/// instead of the plain inverse. Returns the inverse and how many matrices
/// were regularized.
pub fn regularized_inverse(j: &Tensor) -> Result<(Tensor, usize)> {
    let dims = j.dims().to_vec();
    let n = dims.len();
    if n < 2 || dims[n - 1] != 2 || dims[n - 2] != 2 {
        return Err(Error::Argument(format!("expected (..., 2, 2), got {dims:?}")));
    }
    let lead: Vec<usize> = dims[..n - 2].to_vec();
    let flat = j.reshape((lead.iter().product::<usize>(), 4))?;
    let part = |i: usize| flat.narrow(1, i, 1);
    let (a, b, c, d) = (part(0)?, part(1)?, part(2)?, part(3)?);
    let det = ((&a * &d)? - (&b * &c)?)?;

    let det_host = nn::to_vec_f64(&det)?;
    let singular_flags: Vec<f64> = det_host
        .iter()
        .map(|v| if v.abs() < SINGULAR_DET { 1.0 } else { 0.0 })
        .collect();
    let n_singular = singular_flags.iter().filter(|v| **v > 0.0).count();
    let singular = Tensor::from_vec(singular_flags, det.shape(), det.device())?
        .to_dtype(det.dtype())?;

    let plain = |det: &Tensor| -> Result<Tensor> {
        Ok(Tensor::cat(&[&d, &b.neg()?, &c.neg()?, &a], 1)?.broadcast_div(det)?)
    };
    let inv = if n_singular == 0 {
        plain(&det)?
    } else {
        // Keep the plain branch finite where it is masked out.
        let safe_det = ((&det * singular.affine(-1.0, 1.0)?)? + &singular)?;
        let plain_inv = plain(&safe_det)?;
        // M = J^T J + eps I = [[p, q], [q, r]]
        let p = ((a.sqr()? + c.sqr()?)? + RIDGE_EPS)?;
        let q = ((&a * &b)? + (&c * &d)?)?;
        let r = ((b.sqr()? + d.sqr()?)? + RIDGE_EPS)?;
        let mdet = ((&p * &r)? - q.sqr()?)?;
        // M^{-1} J^T, with J^T = [[a, c], [b, d]]
        let i00 = ((&r * &a)? - (&q * &b)?)?;
        let i01 = ((&r * &c)? - (&q * &d)?)?;
        let i10 = ((&p * &b)? - (&q * &a)?)?;
        let i11 = ((&p * &d)? - (&q * &c)?)?;
        let ridge = Tensor::cat(&[&i00, &i01, &i10, &i11], 1)?.broadcast_div(&mdet)?;
        let m = singular.broadcast_as(ridge.shape())?;
        ((ridge * &m)? + (plain_inv * m.affine(-1.0, 1.0)?)?)?
    };
    let mut out_shape = lead;
    out_shape.extend([2, 2]);
    Ok((inv.reshape(out_shape)?, n_singular))
}

/// Per-keypoint first-order backward maps at resolution `(h, w)`:
/// `T_k(z) = p_src,k + J_src,k J_drv,k^{-1} (z - p_drv,k)`, preceded by an
/// identity (background) channel. Shape `(B, K + 1, h, w, 2)`.
pub fn sparse_motions(
    src: &KeypointSet,
    drv: &KeypointSet,
    resolution: (usize, usize),
) -> Result<(Tensor, usize)> {
    let (h, w) = resolution;
    let (b, k, _) = src.positions.dims3()?;
    if drv.positions.dims() != src.positions.dims() {
        return Err(Error::Argument("source and driving keypoint counts differ".into()));
    }
    let dtype = src.positions.dtype();
    let device = src.positions.device();
    let (drv_inv, n_singular) = regularized_inverse(&drv.jacobians)?;
    let affine = src.jacobians.matmul(&drv_inv)?; // (B, K, 2, 2)
    let grid = identity_grid(h, w, dtype, device)?.reshape((1, 1, h * w, 2))?;
    let centered = grid.broadcast_sub(&drv.positions.reshape((b, k, 1, 2))?)?;
    let mapped = centered.matmul(&affine.transpose(2, 3)?.contiguous()?)?;
    let motions = mapped
        .broadcast_add(&src.positions.reshape((b, k, 1, 2))?)?
        .reshape((b, k, h, w, 2))?;
    let background = grid.reshape((1, 1, h, w, 2))?.repeat((b, 1, 1, 1, 1))?;
    Ok((Tensor::cat(&[&background, &motions], 1)?, n_singular))
}

/// Blends sparse motions `(B, K+1, h, w, 2)` with a mask `(B, K+1, h, w)`.
pub fn blend_sparse_motions(motions: &Tensor, mask: &Tensor) -> Result<FlowField> {
    let weighted = motions.broadcast_mul(&mask.unsqueeze(4)?)?;
    FlowField::new(weighted.sum(1)?)
}

#[derive(Debug, Clone)]
pub struct DenseMotionOutput {
    pub flow: FlowField,
    /// Softmax blending mask at estimator resolution, `(B, K+1, r, r)`.
    pub mask: Tensor,
    /// Driving Jacobians that needed the regularized inverse.
    pub singular_jacobians: usize,
}

/// Predicts the blending mask that turns sparse keypoint motions into a
/// dense flow M^0.
#[derive(Debug, Clone)]
pub struct DenseMotion {
    body: Hourglass,
    mask: Conv2d,
    image_size: usize,
    downsample: usize,
    flow_size: usize,
    variance: f64,
}

impl DenseMotion {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let k1 = cfg.n_keypoints + 1;
        let in_c = k1 * 4;
        Ok(Self {
            body: Hourglass::new(&store.pp("body"), in_c, cfg.estimator_channels)?,
            mask: Conv2d::new(&store.pp("mask"), cfg.estimator_channels, k1, 3, 1, true)?
                .with_padding(1, Padding::Replicate),
            image_size: cfg.image_size,
            downsample: cfg.estimator_downsample,
            flow_size: cfg.flow_size,
            variance: cfg.keypoint_sigma2,
        })
    }

    pub fn forward(
        &self,
        src_kp: &KeypointSet,
        drv_kp: &KeypointSet,
        src_image: &Tensor,
    ) -> Result<DenseMotionOutput> {
        let (b, _, h, w) = src_image.dims4()?;
        if h != self.image_size || w != self.image_size {
            return Err(Error::Config(format!(
                "dense motion expects {s}x{s} images, got {h}x{w}",
                s = self.image_size
            )));
        }
        let r = self.image_size / self.downsample;
        let k1 = src_kp.len() + 1;
        let (motions, n_singular) = sparse_motions(src_kp, drv_kp, (r, r))?;

        let heat_drv = keypoint_heatmaps(drv_kp, (r, r), self.variance)?.maps;
        let heat_src = keypoint_heatmaps(src_kp, (r, r), self.variance)?.maps;
        let zeros = heat_drv.narrow(1, 0, 1)?.zeros_like()?;
        let heat = Tensor::cat(&[&zeros, &(heat_drv - heat_src)?], 1)?;

        let small = resize(src_image, r, r)?;
        let repeated = small
            .unsqueeze(1)?
            .repeat((1, k1, 1, 1, 1))?
            .reshape((b * k1, 3, r, r))?;
        let deformed = grid_sample(&repeated, &motions.reshape((b * k1, r, r, 2))?)?
            .reshape((b, k1 * 3, r, r))?;

        let input = Tensor::cat(&[&heat, &deformed], 1)?;
        let feat = self.body.forward(&input)?;
        let mask = nn::softmax(&self.mask.forward(&feat)?, 1)?;

        let (flow_motions, _) = sparse_motions(src_kp, drv_kp, (self.flow_size, self.flow_size))?;
        let flow_mask = resize(&mask, self.flow_size, self.flow_size)?;
        let flow = blend_sparse_motions(&flow_motions, &flow_mask)?;
        Ok(DenseMotionOutput {
            flow,
            mask,
            singular_jacobians: n_singular,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device};

    fn kp(positions: Vec<f64>, jacobians: Vec<f64>, k: usize) -> KeypointSet {
        KeypointSet::new(
            Tensor::from_vec(positions, (1, k, 2), &Device::Cpu).unwrap(),
            Tensor::from_vec(jacobians, (1, k, 2, 2), &Device::Cpu).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn inverse_of_well_conditioned_matrix_is_exact_enough() {
        let j = Tensor::new(&[[[2.0f64, 1.0], [0.5, 3.0]]], &Device::Cpu).unwrap();
        let (inv, n) = regularized_inverse(&j).unwrap();
        assert_eq!(n, 0);
        let prod = to_vec_f64(&j.matmul(&inv).unwrap()).unwrap();
        for (v, e) in prod.iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_takes_ridge_inverse_and_is_counted() {
        let j = Tensor::new(&[[[1.0f64, 2.0], [2.0, 4.0]], [[1.0, 0.0], [0.0, 1.0]]], &Device::Cpu)
            .unwrap();
        let (inv, n) = regularized_inverse(&j).unwrap();
        assert_eq!(n, 1);
        let v = to_vec_f64(&inv).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        // Oracle: (J^T J + eps I)^{-1} J^T evaluated by hand for J = [[1,2],[2,4]].
        let (p, q, r) = (5.0 + RIDGE_EPS, 10.0, 20.0 + RIDGE_EPS);
        let det = p * r - q * q;
        let minv = [r / det, -q / det, -q / det, p / det];
        let jt = [1.0, 2.0, 2.0, 4.0];
        let expect = [
            minv[0] * jt[0] + minv[1] * jt[2],
            minv[0] * jt[1] + minv[1] * jt[3],
            minv[2] * jt[0] + minv[3] * jt[2],
            minv[2] * jt[1] + minv[3] * jt[3],
        ];
        for (a, e) in v[..4].iter().zip(expect) {
            assert!((a - e).abs() < 1e-9 * e.abs().max(1.0));
        }
        assert_eq!(&v[4..], &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn equal_keypoints_give_identity_motions() {
        let k = kp(vec![0.1, -0.3, 0.5, 0.2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], 2);
        let (m, _) = sparse_motions(&k, &k, (8, 8)).unwrap();
        let id = to_vec_f64(&identity_grid(8, 8, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let m = to_vec_f64(&m).unwrap();
        for chunk in m.chunks(id.len()) {
            for (a, b) in chunk.iter().zip(&id) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forced_mask_translation_is_identity_plus_offset() {
        let (dx, dy) = (0.125, -0.25);
        let src = kp(vec![0.2 + dx, 0.1 + dy], vec![1.0, 0.0, 0.0, 1.0], 1);
        let drv = kp(vec![0.2, 0.1], vec![1.0, 0.0, 0.0, 1.0], 1);
        let (m, _) = sparse_motions(&src, &drv, (16, 16)).unwrap();
        let mut mask = vec![0.0; 2 * 16 * 16];
        mask[256..].iter_mut().for_each(|v| *v = 1.0);
        let mask = Tensor::from_vec(mask, (1, 2, 16, 16), &Device::Cpu).unwrap();
        let flow = blend_sparse_motions(&m, &mask).unwrap();
        let disp = to_vec_f64(&flow.displacement().unwrap()).unwrap();
        for pair in disp.chunks(2) {
            assert!((pair[0] - dx).abs() < 1e-12 && (pair[1] - dy).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_motion_shape_and_fixed_point() {
        let cfg = ModelConfig {
            image_size: 32,
            flow_size: 16,
            estimator_channels: 8,
            n_keypoints: 10,
            ..ModelConfig::default()
        };
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let dm = DenseMotion::new(&store, &cfg).unwrap();
        let pos: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let positions = Tensor::from_vec(pos, (2, 10, 2), &Device::Cpu).unwrap();
        let k = KeypointSet::from_positions(positions).unwrap();
        let img = Tensor::full(0.3f64, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let out = dm.forward(&k, &k, &img).unwrap();
        assert_eq!(out.flow.grid().dims(), &[2, 16, 16, 2]);
        let disp = to_vec_f64(&out.flow.displacement().unwrap()).unwrap();
        assert!(disp.iter().all(|v| v.abs() < 1e-5));
        assert_eq!(out.singular_jacobians, 0);
    }
}
