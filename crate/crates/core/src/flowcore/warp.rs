use candle_core::{DType, Device, Tensor};

use super::FlowField;
use crate::error::{Error, Result};

/// Regular mesh over [-1, 1]^2 at pixel centers, shape `(h, w, 2)`.
pub fn identity_grid(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let xs: Vec<f64> = (0..w).map(|j| (2 * j + 1) as f64 / w as f64 - 1.0).collect();
    let ys: Vec<f64> = (0..h).map(|i| (2 * i + 1) as f64 / h as f64 - 1.0).collect();
    let mut data = Vec::with_capacity(h * w * 2);
    for y in &ys {
        for x in &xs {
            data.push(*x);
            data.push(*y);
        }
    }
    Ok(Tensor::from_vec(data, (h, w, 2), device)?.to_dtype(dtype)?)
}

/// Bilinear backward sampling with border clamping.
///
/// `feature` is `(B, C, H, W)`, `grid` is `(B, Ho, Wo, 2)`; the result is
/// `(B, C, Ho, Wo)`. Differentiable with respect to both inputs.
pub fn grid_sample(feature: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = feature.dims4()?;
    let (gb, ho, wo, two) = grid.dims4()?;
    if gb != b || two != 2 {
        return Err(Error::Argument(format!(
            "grid {:?} does not match feature {:?}",
            grid.dims(),
            feature.dims()
        )));
    }
    let dtype = feature.dtype();
    let grid = grid.to_dtype(dtype)?;
    let gx = grid.narrow(3, 0, 1)?.squeeze(3)?;
    let gy = grid.narrow(3, 1, 1)?.squeeze(3)?;
    // normalized -> pixel index space, clamped to the border
    let px = ((gx + 1.0)? * (w as f64 / 2.0))?
        .affine(1.0, -0.5)?
        .clamp(0.0, (w - 1) as f64)?;
    let py = ((gy + 1.0)? * (h as f64 / 2.0))?
        .affine(1.0, -0.5)?
        .clamp(0.0, (h - 1) as f64)?;
    let px = snap(&px)?;
    let py = snap(&py)?;
    let x0 = px
        .detach()
        .floor()?
        .clamp(0.0, w.saturating_sub(2) as f64)?;
    let y0 = py
        .detach()
        .floor()?
        .clamp(0.0, h.saturating_sub(2) as f64)?;
    let fx = (&px - &x0)?;
    let fy = (&py - &y0)?;
    let x1 = if w > 1 { (&x0 + 1.0)? } else { x0.clone() };
    let y1 = if h > 1 { (&y0 + 1.0)? } else { y0.clone() };

    let offsets: Vec<f64> = (0..b).map(|i| (i * h * w) as f64).collect();
    let offsets = Tensor::from_vec(offsets, (b, 1, 1), feature.device())?.to_dtype(dtype)?;
    let flat_index = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy * w as f64)? + xx)?.broadcast_add(&offsets)?;
        Ok(idx.flatten_all()?.to_dtype(DType::U32)?)
    };
    let values = feature
        .permute((0, 2, 3, 1))?
        .reshape((b * h * w, c))?;
    let gather = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        Ok(values.index_select(&flat_index(yy, xx)?, 0)?)
    };
    let column = |t: Tensor| -> Result<Tensor> { Ok(t.flatten_all()?.unsqueeze(1)?) };
    let one_fx = fx.affine(-1.0, 1.0)?;
    let one_fy = fy.affine(-1.0, 1.0)?;
    let w00 = column((&one_fx * &one_fy)?)?;
    let w01 = column((&fx * &one_fy)?)?;
    let w10 = column((&one_fx * &fy)?)?;
    let w11 = column((&fx * &fy)?)?;

    let out = (gather(&y0, &x0)?.broadcast_mul(&w00)?
        + gather(&y0, &x1)?.broadcast_mul(&w01)?)?;
    let out = (out + gather(&y1, &x0)?.broadcast_mul(&w10)?)?;
    let out = (out + gather(&y1, &x1)?.broadcast_mul(&w11)?)?;
    Ok(out.reshape((b, ho, wo, c))?.permute((0, 3, 1, 2))?)
}

/// Moves sample positions within `SNAP_TOL` of a pixel center onto it,
/// keeping the gradient. Rounding in the normalized-to-pixel mapping would
/// otherwise blend in a neighbour by a few ulps and break exact resampling.
fn snap(p: &Tensor) -> Result<Tensor> {
    let offset = (p.detach().round()? - p.detach())?;
    let near = offset.abs()?.lt(SNAP_TOL)?.to_dtype(p.dtype())?;
    Ok((p + (offset * near)?)?)
}

const SNAP_TOL: f64 = 1e-4;

/// Warps `feature` (`B x C x H x W`) by `flow`, resampling the flow to
/// `(H, W)` first when the resolutions differ.
pub fn warp(feature: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (_, _, h, w) = feature.dims4()?;
    let flow = flow.resize(h, w)?;
    grid_sample(feature, flow.grid())
}

/// Bilinear resize of a `(B, C, H, W)` tensor (pixel-center aligned).
pub fn resize(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, xh, xw) = x.dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    let grid = identity_grid(h, w, x.dtype(), x.device())?
        .unsqueeze(0)?
        .repeat((b, 1, 1, 1))?;
    grid_sample(x, &grid)
}
