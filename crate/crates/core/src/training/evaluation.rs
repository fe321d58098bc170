//! Held-out evaluation of a trained model: video reconstruction and
//! reenactment, metric reports, flow round-trip error and code usage.

use candle_core::{Device, Tensor};

use super::model::FaceAnimator;
use crate::codebook::UsageStats;
use crate::error::{Error, Result};
use crate::toolkit::dataset::{FrameDataset, Split, VideoFrames};
use crate::toolkit::metrics::{evaluate, Embedder, Landmarker, MetricReport};

/// Frames per generator call during evaluation.
pub const EVAL_BATCH: usize = 8;

/// Splits a `(B, 3, H, W)` tensor into interleaved RGB frames.
pub fn tensor_to_frames(images: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (b, _, h, w) = images.dims4()?;
    let flat = images
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(flat.chunks_exact(h * w * 3).take(b).map(<[f32]>::to_vec).collect())
}

/// Animates `source` with every frame of `driving`.
pub fn reenact(model: &FaceAnimator, source: &[f32], driving: &[Vec<f32>], size: usize) -> Result<Vec<Vec<f32>>> {
    let dev = model.device().clone();
    let mut out = Vec::with_capacity(driving.len());
    for chunk in driving.chunks(EVAL_BATCH) {
        let n = chunk.len();
        let src = FrameDataset::to_tensor(&vec![source; n], size, &dev)?;
        let drv: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
        let drv = FrameDataset::to_tensor(&drv, size, &dev)?;
        out.extend(tensor_to_frames(&model.animate(&src, &drv)?.detach())?);
    }
    Ok(out)
}

/// Reconstructs a video from its first frame driven by all of its frames.
pub fn reconstruct_video(model: &FaceAnimator, video: &VideoFrames, size: usize) -> Result<VideoFrames> {
    let first = video
        .frames
        .first()
        .ok_or_else(|| Error::Argument(format!("video {} has no frames", video.id)))?;
    Ok(VideoFrames {
        id: video.id.clone(),
        split: video.split,
        frames: reenact(model, first, &video.frames, size)?,
        landmarks: None,
    })
}

/// Reconstruction metrics over one split.
pub fn reconstruction_report(
    model: &FaceAnimator,
    data: &FrameDataset,
    split: Split,
    landmarker: &dyn Landmarker,
    embedder: Option<&dyn Embedder>,
) -> Result<MetricReport> {
    let truth: Vec<VideoFrames> = data.split(split).into_iter().cloned().collect();
    let generated = truth
        .iter()
        .map(|v| reconstruct_video(model, v, data.size))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&generated, &truth, data.size, landmarker, embedder)
}

/// (first frame, frame k) pairs of every video of a split, in batches.
fn first_frame_batches<'a>(data: &'a FrameDataset, split: Split) -> Vec<(Vec<&'a [f32]>, Vec<&'a [f32]>)> {
    let mut pairs = Vec::new();
    for v in data.split(split) {
        for f in &v.frames {
            pairs.push((v.frames[0].as_slice(), f.as_slice()));
        }
    }
    pairs
        .chunks(EVAL_BATCH)
        .map(|c| c.iter().copied().unzip())
        .collect()
}

/// Flow statistics gathered by running the generator over a split.
#[derive(Debug, Clone)]
pub struct FlowProbe {
    /// Mean endpoint error of `D_M(Q(E_M(M)))` against `M`, in pixels of
    /// the flow grid, over every input flow `M^{i-1}` of every scale.
    pub round_trip_epe_px: Option<f64>,
    pub motion_usage: UsageStats,
    pub appearance_usage: UsageStats,
}

/// Runs (first frame, frame k) pairs of `split` through the generator and
/// collects flow round-trip error and codebook usage.
pub fn probe_flows(model: &FaceAnimator, data: &FrameDataset, split: Split) -> Result<FlowProbe> {
    let dev: Device = model.device().clone();
    let mut motion_usage = UsageStats::for_codebook(&model.motion_codebook);
    let mut appearance_usage = UsageStats::for_codebook(&model.appearance_codebook);
    let (mut epe_sum, mut epe_n) = (0.0, 0usize);
    for (src, drv) in first_frame_batches(data, split) {
        let src = FrameDataset::to_tensor(&src, data.size, &dev)?;
        let drv = FrameDataset::to_tensor(&drv, data.size, &dev)?;
        let out = model.generate(&src, &drv, true)?;
        for (k, step) in out.motion_steps.iter().enumerate() {
            let input = if k == 0 { &out.initial_flow } else { &out.flows[k - 1] };
            let side = input.resolution().0;
            epe_sum += step.reconstruction.endpoint_error_px(input, side)?;
            epe_n += 1;
            motion_usage.record(k + 1, &step.quantization.indices);
        }
        for (k, step) in out.appearance_steps.iter().enumerate() {
            if let Some(q) = &step.quantization {
                appearance_usage.record(k + 1, &q.indices);
            }
        }
    }
    Ok(FlowProbe {
        round_trip_epe_px: (epe_n > 0).then(|| epe_sum / epe_n as f64),
        motion_usage,
        appearance_usage,
    })
}
