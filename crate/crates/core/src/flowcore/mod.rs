//! Keypoints, first-order dense motion, and backward warping.
//!
//! Flows are absolute backward-sampling grids in normalized coordinates:
//! `grid[b, y, x] = (u, v)` means output pixel `(x, y)` reads the input at
//! normalized position `(u, v)`, where -1 and 1 are the outer edges of the
//! first and last pixel. The identity grid therefore hits pixel centers.

mod dense;
mod keypoints;
mod transform;
mod warp;

pub use dense::{
    blend_sparse_motions, regularized_inverse, sparse_motions, DenseMotion, DenseMotionOutput,
    SINGULAR_DET, RIDGE_EPS,
};
pub use keypoints::{keypoint_heatmaps, soft_argmax, KeypointDetector};
pub use transform::RandomTransform;
pub use warp::{grid_sample, identity_grid, resize, warp};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Dense backward-sampling grid, `batch x h x w x 2`, last dim `(x, y)`.
#[derive(Debug, Clone)]
pub struct FlowField {
    grid: Tensor,
}

impl FlowField {
    pub fn new(grid: Tensor) -> Result<Self> {
        let dims = grid.dims();
        if dims.len() != 4 || dims[3] != 2 {
            return Err(Error::Argument(format!(
                "flow grid must be (B, h, w, 2), got {dims:?}"
            )));
        }
        Ok(Self { grid })
    }

    pub fn identity(batch: usize, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Self> {
        let grid = identity_grid(h, w, dtype, device)?
            .unsqueeze(0)?
            .repeat((batch, 1, 1, 1))?;
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn into_grid(self) -> Tensor {
        self.grid
    }

    pub fn batch(&self) -> usize {
        self.grid.dims()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        let d = self.grid.dims();
        (d[1], d[2])
    }

    /// `self + displacement`, with `displacement` shaped like the grid.
    pub fn add_displacement(&self, displacement: &Tensor) -> Result<Self> {
        Self::new((&self.grid + displacement)?)
    }

    /// Offset from the identity grid, same shape as the grid.
    pub fn displacement(&self) -> Result<Tensor> {
        let (h, w) = self.resolution();
        let id = identity_grid(h, w, self.grid.dtype(), self.grid.device())?;
        Ok(self.grid.broadcast_sub(&id.unsqueeze(0)?)?)
    }

    /// `(B, 2, h, w)` view for convolutional processing.
    pub fn channels_first(&self) -> Result<Tensor> {
        Ok(self.grid.permute((0, 3, 1, 2))?)
    }

    pub fn from_channels_first(t: &Tensor) -> Result<Self> {
        Self::new(t.permute((0, 2, 3, 1))?)
    }

    /// Bilinear resampling of the grid to a new resolution.
    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        if self.resolution() == (h, w) {
            return Ok(self.clone());
        }
        let cf = resize(&self.channels_first()?, h, w)?;
        Self::from_channels_first(&cf)
    }

    pub fn detach(&self) -> Self {
        Self {
            grid: self.grid.detach(),
        }
    }

    /// Mean endpoint error against `other`, in pixels of a `pixels`-wide image.
    pub fn endpoint_error_px(&self, other: &FlowField, pixels: usize) -> Result<f64> {
        let diff = (&self.grid - &other.grid)?;
        let epe = diff.sqr()?.sum(3)?.sqrt()?.mean_all()?;
        Ok(crate::nn::scalar(&epe)? * pixels as f64 / 2.0)
    }
}

/// Unsupervised keypoints with local affine Jacobians.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    /// `(B, K, 2)` in normalized coordinates.
    pub positions: Tensor,
    /// `(B, K, 2, 2)`.
    pub jacobians: Tensor,
}

impl KeypointSet {
    pub fn new(positions: Tensor, jacobians: Tensor) -> Result<Self> {
        let (b, k, two) = positions.dims3()?;
        if two != 2 || jacobians.dims() != [b, k, 2, 2] {
            return Err(Error::Argument(format!(
                "keypoints {:?} / jacobians {:?} are inconsistent",
                positions.dims(),
                jacobians.dims()
            )));
        }
        Ok(Self {
            positions,
            jacobians,
        })
    }

    /// Keypoints with identity Jacobians.
    pub fn from_positions(positions: Tensor) -> Result<Self> {
        let (b, k, _) = positions.dims3()?;
        let eye = Tensor::eye(2, positions.dtype(), positions.device())?
            .reshape((1, 1, 2, 2))?
            .repeat((b, k, 1, 1))?;
        Self::new(positions, eye)
    }

    pub fn batch(&self) -> usize {
        self.positions.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.positions.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn detach(&self) -> Self {
        Self {
            positions: self.positions.detach(),
            jacobians: self.jacobians.detach(),
        }
    }
}

/// Gaussian bumps at keypoint positions, `(B, K, h, w)`.
#[derive(Debug, Clone)]
pub struct KeypointHeatmapFeature {
    pub maps: Tensor,
}
