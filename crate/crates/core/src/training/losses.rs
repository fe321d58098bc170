//! Loss terms of the joint objective.

use candle_core::{DType, Device, Module, Tensor};

use crate::error::Result;
use crate::flowcore::{KeypointDetector, KeypointSet, RandomTransform};
use crate::imagegen::DiscriminatorOutput;
use crate::nn::{self, Conv2d, ParamStore};

/// Feature extractor used by the perceptual part of the reconstruction loss.
pub trait PerceptualExtractor: Send + Sync {
    /// Feature maps of a `(B, 3, H, W)` image in `[0, 1]`.
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>>;
}

/// Randomly initialized, frozen convolutional pyramid. Stands in for a
/// pretrained network so no weights have to be downloaded.
#[derive(Debug, Clone)]
pub struct RandomPerceptual {
    convs: Vec<Conv2d>,
}

impl RandomPerceptual {
    pub const SEED: u64 = 0x5eed_f00d;

    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(Self::SEED, dtype, device);
        let widths = [3, 16, 32, 32];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let stride = if i == 0 { 1 } else { 2 };
                let c = Conv2d::new(&store.pp(format!("conv{i}")), w[0], w[1], 3, stride, true)?;
                // Detached copies: the extractor never receives gradients.
                let weight = c.weight().detach();
                let bias = store.var(&format!("conv{i}.bias")).map(|v| v.as_tensor().detach());
                Conv2d::from_parts(weight, bias, stride)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }
}

impl PerceptualExtractor for RandomPerceptual {
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = image.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            x = nn::leaky_relu(&c.forward(&x)?, 0.2)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Reconstruction loss split into its L1 and perceptual parts.
#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    pub l1: Tensor,
    pub perceptual: Tensor,
    /// `l1 + weight * perceptual`.
    pub total: Tensor,
}

/// Downsamples by `scale` (a power of 1/2) with average pooling.
fn pyramid_level(image: &Tensor, scale: f64) -> Result<Tensor> {
    let mut x = image.clone();
    let mut s = 1.0;
    while s > scale + 1e-9 {
        x = nn::avg_pool2(&x)?;
        s *= 0.5;
    }
    Ok(x)
}

pub fn loss_reconstruction(
    generated: &Tensor,
    target: &Tensor,
    extractor: &dyn PerceptualExtractor,
    scales: &[f64],
    perceptual_weight: f64,
) -> Result<ReconstructionLoss> {
    let l1 = nn::mean_abs(&(generated - target)?)?;
    let mut perceptual = l1.zeros_like()?;
    if perceptual_weight > 0.0 {
        for &s in scales {
            let g = extractor.features(&pyramid_level(generated, s)?)?;
            let t = extractor.features(&pyramid_level(target, s)?)?;
            for (a, b) in g.iter().zip(&t) {
                perceptual = (perceptual + nn::mean_abs(&(a - b.detach())?)?)?;
            }
        }
    }
    let total = (&l1 + (&perceptual * perceptual_weight)?)?;
    Ok(ReconstructionLoss { l1, perceptual, total })
}

/// Least-squares GAN losses averaged over discriminator scales. Returns
/// `(generator, discriminator)`; the generator term only uses `fake`.
pub fn loss_adversarial(
    fake: &[DiscriminatorOutput],
    real: Option<&[DiscriminatorOutput]>,
) -> Result<(Tensor, Option<Tensor>)> {
    let n = fake.len() as f64;
    let mut g = None::<Tensor>;
    for f in fake {
        let t = nn::mean_sq(&(&f.logits - 1.0)?)?;
        g = Some(match g {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    let g = (g.expect("at least one discriminator scale") / n)?;
    let d = match real {
        Some(real) => {
            let mut acc = g.zeros_like()?;
            for (f, r) in fake.iter().zip(real) {
                acc = ((acc + nn::mean_sq(&(&r.logits - 1.0)?)?)? + nn::mean_sq(&f.logits)?)?;
            }
            Some((acc / n)?)
        }
        None => None,
    };
    Ok((g, d))
}

fn batched_inverse_2x2(m: &Tensor) -> Result<Tensor> {
    let a = m.narrow(2, 0, 1)?.narrow(3, 0, 1)?;
    let b = m.narrow(2, 0, 1)?.narrow(3, 1, 1)?;
    let c = m.narrow(2, 1, 1)?.narrow(3, 0, 1)?;
    let d = m.narrow(2, 1, 1)?.narrow(3, 1, 1)?;
    let det = ((&a * &d)? - (&b * &c)?)?;
    let row0 = Tensor::cat(&[&d, &b.neg()?], 3)?;
    let row1 = Tensor::cat(&[&c.neg()?, &a], 3)?;
    Ok(Tensor::cat(&[&row0, &row1], 2)?.broadcast_div(&det)?)
}

/// Equivariance of the detector under a known deformation `T`.
///
/// The transformed image samples `image` at `T(z)`, so a point detected at
/// `p` in the transformed image corresponds to `T(p)` in the original:
/// the loss is `mean |kp(I) - T(kp(I o T))|`. With `jacobian_term`, the
/// detected Jacobians must also compose with the derivative of `T`.
pub fn loss_equivariance(
    detector: &KeypointDetector,
    image: &Tensor,
    kp: &KeypointSet,
    transform: &RandomTransform,
    jacobian_term: bool,
) -> Result<Tensor> {
    let transformed = transform.transform_image(image)?;
    let kp_t = detector.detect(&transformed)?;
    let mapped = transform.warp_coordinates(&kp_t.positions)?;
    let mut loss = nn::mean_abs(&(&kp.positions - mapped)?)?;
    if jacobian_term {
        let grad_t = transform.jacobian(&kp_t.positions)?;
        let composed = grad_t.matmul(&kp_t.jacobians)?;
        let (b, k, _, _) = composed.dims4()?;
        let eye = Tensor::eye(2, composed.dtype(), composed.device())?.broadcast_as((b, k, 2, 2))?;
        let residual = (batched_inverse_2x2(&composed)?.matmul(&kp.jacobians)? - eye)?;
        loss = (loss + nn::mean_abs(&residual)?)?;
    }
    Ok(loss)
}

/// `sum_{i != j} max(0, margin - |p_i - p_j|)`, averaged over the batch.
pub fn loss_keypoint_distance(kp: &KeypointSet, margin: f64) -> Result<Tensor> {
    let p = &kp.positions;
    let (b, k, _) = p.dims3()?;
    let diff = p.unsqueeze(2)?.broadcast_sub(&p.unsqueeze(1)?)?;
    let dist = (diff.sqr()?.sum(3)? + 1e-12)?.sqrt()?;
    let hinge = dist.affine(-1.0, margin)?.relu()?;
    let off_diag = (Tensor::ones((k, k), p.dtype(), p.device())? - Tensor::eye(k, p.dtype(), p.device())?)?;
    Ok((hinge.broadcast_mul(&off_diag)?.sum_all()? / b as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, to_vec_f64};
    use candle_core::Device;

    fn disc_out(v: f64, shape: (usize, usize, usize, usize)) -> DiscriminatorOutput {
        DiscriminatorOutput {
            logits: Tensor::full(v, shape, &Device::Cpu).unwrap(),
            features: vec![],
        }
    }

    #[test]
    fn reconstruction_zero_for_identical_and_abs_c_for_constants() {
        let ext = RandomPerceptual::new(DType::F64, &Device::Cpu).unwrap();
        let a = Tensor::full(0.3f64, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let same = loss_reconstruction(&a, &a, &ext, &[1.0, 0.5], 1.0).unwrap();
        assert_eq!(scalar(&same.l1).unwrap(), 0.0);
        assert_eq!(scalar(&same.perceptual).unwrap(), 0.0);
        let b = Tensor::full(0.55f64, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let diff = loss_reconstruction(&a, &b, &ext, &[1.0], 0.0).unwrap();
        assert!((scalar(&diff.l1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lsgan_closed_forms() {
        let shape = (2, 1, 4, 4);
        let (g, _) = loss_adversarial(&[disc_out(1.0, shape)], None).unwrap();
        assert_eq!(scalar(&g).unwrap(), 0.0);
        let (_, d) = loss_adversarial(&[disc_out(0.0, shape)], Some(&[disc_out(1.0, shape)])).unwrap();
        assert_eq!(scalar(&d.unwrap()).unwrap(), 0.0);
        // Two scales, fake 0.25 / -0.5, real 0.5 / 2.0.
        let fake = [disc_out(0.25, shape), disc_out(-0.5, (2, 1, 2, 2))];
        let real = [disc_out(0.5, shape), disc_out(2.0, (2, 1, 2, 2))];
        let (g, d) = loss_adversarial(&fake, Some(&real)).unwrap();
        let g_hand = (0.75f64.powi(2) + 1.5f64.powi(2)) / 2.0;
        let d_hand = (0.5f64.powi(2) + 0.25f64.powi(2) + 1.0 + 0.5f64.powi(2)) / 2.0;
        assert!((scalar(&g).unwrap() - g_hand).abs() < 1e-12);
        assert!((scalar(&d.unwrap()).unwrap() - d_hand).abs() < 1e-12);
    }

    #[test]
    fn keypoint_distance_cases() {
        let far = Tensor::new(&[[[-0.8f64, -0.8], [0.8, -0.8], [-0.8, 0.8], [0.8, 0.8]]], &Device::Cpu).unwrap();
        let kp = KeypointSet::from_positions(far).unwrap();
        assert_eq!(scalar(&loss_keypoint_distance(&kp, 0.2).unwrap()).unwrap(), 0.0);

        let coincident = Tensor::new(&[[[0.1f64, 0.1], [0.1, 0.1], [-0.8, 0.8], [0.8, -0.8]]], &Device::Cpu).unwrap();
        let kp = KeypointSet::from_positions(coincident).unwrap();
        let l = scalar(&loss_keypoint_distance(&kp, 0.2).unwrap()).unwrap();
        assert!((l - 0.4).abs() < 1e-5, "{l}");

        let pts: Vec<f64> = (0..12).map(|i| ((i * 7919) % 23) as f64 / 23.0 * 0.4 - 0.2).collect();
        let kp = KeypointSet::from_positions(Tensor::from_vec(pts.clone(), (1, 6, 2), &Device::Cpu).unwrap()).unwrap();
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    let d = ((pts[2 * i] - pts[2 * j]).powi(2) + (pts[2 * i + 1] - pts[2 * j + 1]).powi(2) + 1e-12).sqrt();
                    oracle += (0.2 - d).max(0.0);
                }
            }
        }
        let l = scalar(&loss_keypoint_distance(&kp, 0.2).unwrap()).unwrap();
        assert!((l - oracle).abs() < 1e-9);
    }

    #[test]
    fn inverse_2x2_matches_hand_values() {
        let m = Tensor::new(&[[[[2.0f64, 1.0], [1.0, 3.0]]]], &Device::Cpu).unwrap();
        let inv = to_vec_f64(&batched_inverse_2x2(&m).unwrap()).unwrap();
        let expect = [0.6, -0.2, -0.2, 0.4];
        for (a, b) in inv.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
