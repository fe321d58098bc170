use candle_core::{Module, Tensor};

use super::{identity_grid, KeypointHeatmapFeature, KeypointSet};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, GroupNorm, Init, Padding, ParamStore};

/// Gaussian heatmaps `exp(-|z - p_k|^2 / (2 variance))` on the normalized grid.
pub fn keypoint_heatmaps(
    kp: &KeypointSet,
    resolution: (usize, usize),
    variance: f64,
) -> Result<KeypointHeatmapFeature> {
    let (h, w) = resolution;
    let pos = &kp.positions;
    let (b, k, _) = pos.dims3()?;
    let grid = identity_grid(h, w, pos.dtype(), pos.device())?.reshape((1, 1, h, w, 2))?;
    let diff = grid.broadcast_sub(&pos.reshape((b, k, 1, 1, 2))?)?;
    let maps = (diff.sqr()?.sum(4)? * (-0.5 / variance))?.exp()?;
    Ok(KeypointHeatmapFeature { maps })
}

/// Spatial softmax of `logits` (`B x K x h x w`) at `temperature`, and the
/// expected grid position under it. Returns `(positions, heatmaps)`.
pub fn soft_argmax(logits: &Tensor, temperature: f64) -> Result<(Tensor, Tensor)> {
    let (b, k, h, w) = logits.dims4()?;
    let flat = (logits.reshape((b, k, h * w))? / temperature)?;
    let heat = nn::softmax(&flat, 2)?;
    let grid = identity_grid(h, w, logits.dtype(), logits.device())?.reshape((1, h * w, 2))?;
    let positions = heat.broadcast_matmul(&grid)?;
    Ok((positions, heat.reshape((b, k, h, w))?))
}

/// Two-level hourglass with skip connections and replicate padding, so that
/// a spatially constant input yields a spatially constant output.
#[derive(Debug, Clone)]
pub(crate) struct Hourglass {
    conv_in: Conv2d,
    norm_in: GroupNorm,
    down1: Conv2d,
    norm1: GroupNorm,
    down2: Conv2d,
    norm2: GroupNorm,
    up1: Conv2d,
    norm_up1: GroupNorm,
    up0: Conv2d,
    norm_up0: GroupNorm,
}

impl Hourglass {
    pub(crate) fn new(store: &ParamStore, in_c: usize, width: usize) -> Result<Self> {
        let conv = |name: &str, i: usize, o: usize| -> Result<Conv2d> {
            Ok(Conv2d::new(&store.pp(name), i, o, 3, 1, true)?.with_padding(1, Padding::Replicate))
        };
        let w2 = width * 2;
        Ok(Self {
            conv_in: conv("conv_in", in_c, width)?,
            norm_in: GroupNorm::new(&store.pp("norm_in"), width, 8)?,
            down1: conv("down1", width, w2)?,
            norm1: GroupNorm::new(&store.pp("norm1"), w2, 8)?,
            down2: conv("down2", w2, w2)?,
            norm2: GroupNorm::new(&store.pp("norm2"), w2, 8)?,
            up1: conv("up1", w2 * 2, w2)?,
            norm_up1: GroupNorm::new(&store.pp("norm_up1"), w2, 8)?,
            up0: conv("up0", w2 + width, width)?,
            norm_up0: GroupNorm::new(&store.pp("norm_up0"), width, 8)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let act = |conv: &Conv2d, norm: &GroupNorm, t: &Tensor| -> Result<Tensor> {
            Ok(norm.forward(&conv.forward(t)?)?.silu()?)
        };
        let x0 = act(&self.conv_in, &self.norm_in, x)?;
        let x1 = act(&self.down1, &self.norm1, &nn::avg_pool2(&x0)?)?;
        let x2 = act(&self.down2, &self.norm2, &nn::avg_pool2(&x1)?)?;
        let u1 = Tensor::cat(&[&nn::upsample_nearest2(&x2)?, &x1], 1)?;
        let u1 = act(&self.up1, &self.norm_up1, &u1)?;
        let u0 = Tensor::cat(&[&nn::upsample_nearest2(&u1)?, &x0], 1)?;
        act(&self.up0, &self.norm_up0, &u0)
    }
}

/// Predicts keypoint heatmaps and per-keypoint Jacobians from an image.
#[derive(Debug, Clone)]
pub struct KeypointDetector {
    body: Hourglass,
    heat: Conv2d,
    jacobian: Conv2d,
    image_size: usize,
    downsample: usize,
    n_kp: usize,
    temperature: f64,
}

impl KeypointDetector {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let width = cfg.estimator_channels;
        let k = cfg.n_keypoints;
        let heat = Conv2d::new(&store.pp("heat"), width, k, 3, 1, true)?
            .with_padding(1, Padding::Replicate);
        // Jacobian head starts at the identity: zero weights, identity bias.
        let jstore = store.pp("jacobian");
        let weight = jstore.get(&[4 * k, width, 3, 3], "weight", Init::Zeros)?;
        let eye: Vec<f64> = (0..k).flat_map(|_| [1.0, 0.0, 0.0, 1.0]).collect();
        let bias = jstore.get_values(&[4 * k], "bias", eye)?;
        let jacobian =
            Conv2d::from_parts(weight, Some(bias), 1)?.with_padding(1, Padding::Replicate);
        Ok(Self {
            body: Hourglass::new(&store.pp("body"), 3, width)?,
            heat,
            jacobian,
            image_size: cfg.image_size,
            downsample: cfg.estimator_downsample,
            n_kp: k,
            temperature: cfg.keypoint_temperature,
        })
    }

    pub fn n_keypoints(&self) -> usize {
        self.n_kp
    }

    /// Keypoints and the spatial heatmaps they were read from.
    pub fn detect_with_heatmaps(&self, image: &Tensor) -> Result<(KeypointSet, Tensor)> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Config(format!(
                "detector expects (B, 3, {s}, {s}) images, got {:?}",
                image.dims(),
                s = self.image_size
            )));
        }
        let mut x = image.clone();
        let mut f = self.downsample;
        while f > 1 {
            x = nn::avg_pool2(&x)?;
            f /= 2;
        }
        let feat = self.body.forward(&x)?;
        let logits = self.heat.forward(&feat)?;
        let (positions, heat) = soft_argmax(&logits, self.temperature)?;
        let (_, k, hh, ww) = heat.dims4()?;
        let jac = self
            .jacobian
            .forward(&feat)?
            .reshape((b, k, 4, hh * ww))?;
        let weights = heat.reshape((b, k, 1, hh * ww))?;
        let jacobians = jac
            .broadcast_mul(&weights)?
            .sum(3)?
            .reshape((b, k, 2, 2))?;
        Ok((KeypointSet::new(positions, jacobians)?, heat))
    }

    pub fn detect(&self, image: &Tensor) -> Result<KeypointSet> {
        Ok(self.detect_with_heatmaps(image)?.0)
    }
}
