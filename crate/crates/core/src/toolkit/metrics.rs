//! Evaluation metrics: PSNR, L1, average keypoint distance (AKD) and
//! average embedding distance (AED), plus the JSON report.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::dataset::{FrameDataset, VideoFrames};
use super::sprites::{LEFT_EYE_COLOR, MARK_COLOR, MOUTH_COLOR, N_LANDMARKS, RIGHT_EYE_COLOR};
use crate::error::{Error, Result};
use crate::imagegen::ImageEncoder;

pub const PSNR_CAP: f64 = 100.0;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check_same(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument(format!(
            "metric inputs differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn metric_psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean absolute difference.
pub fn metric_l1(a: &[f32], b: &[f32]) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64)
}

/// Locates landmarks in an interleaved RGB frame; `None` when it cannot.
pub trait Landmarker {
    fn landmarks(&self, frame: &[f32], size: usize) -> Option<Vec<[f64; 2]>>;
}

/// Finds sprite landmarks from colour: the foreground centroid for the head
/// and the centroid of each part colour for the others.
#[derive(Debug, Clone, Copy)]
pub struct ColorLandmarker {
    /// Max per-channel distance to a part colour.
    pub tolerance: f32,
    /// Min L1 distance from the background colour to count as foreground.
    pub foreground_threshold: f32,
}

impl Default for ColorLandmarker {
    fn default() -> Self {
        Self {
            tolerance: 0.2,
            foreground_threshold: 0.3,
        }
    }
}

impl Landmarker for ColorLandmarker {
    fn landmarks(&self, frame: &[f32], size: usize) -> Option<Vec<[f64; 2]>> {
        let px = |x: usize, y: usize| &frame[(y * size + x) * 3..(y * size + x) * 3 + 3];
        let corners = [px(0, 0), px(size - 1, 0), px(0, size - 1), px(size - 1, size - 1)];
        let mut bg = [0f32; 3];
        for c in corners {
            for k in 0..3 {
                bg[k] += c[k] / 4.0;
            }
        }
        let parts = [LEFT_EYE_COLOR, RIGHT_EYE_COLOR, MOUTH_COLOR, MARK_COLOR];
        let mut sums = [[0f64; 3]; N_LANDMARKS];
        for y in 0..size {
            for x in 0..size {
                let p = px(x, y);
                let mut add = |i: usize| {
                    sums[i][0] += x as f64 + 0.5;
                    sums[i][1] += y as f64 + 0.5;
                    sums[i][2] += 1.0;
                };
                let d_bg: f32 = p.iter().zip(bg).map(|(a, b)| (a - b).abs()).sum();
                if d_bg > self.foreground_threshold {
                    add(0);
                }
                for (i, c) in parts.iter().enumerate() {
                    if p.iter().zip(c).all(|(a, b)| (a - b).abs() <= self.tolerance) {
                        add(i + 1);
                    }
                }
            }
        }
        sums.iter()
            .map(|s| (s[2] > 0.0).then(|| [s[0] / s[2], s[1] / s[2]]))
            .collect()
    }
}

/// Maps a batch of frames to identity embeddings.
pub trait Embedder {
    fn embed(&self, frames: &Tensor) -> Result<Vec<Vec<f64>>>;
}

/// Mean-pooled features of every pyramid level of an image encoder.
pub struct EncoderEmbedder {
    pub encoder: ImageEncoder,
    /// Parameter dtype of the encoder.
    pub dtype: candle_core::DType,
}

impl Embedder for EncoderEmbedder {
    fn embed(&self, frames: &Tensor) -> Result<Vec<Vec<f64>>> {
        let pyramid = self.encoder.encode_image(&frames.to_dtype(self.dtype)?)?;
        let pooled = pyramid
            .levels
            .iter()
            .map(|l| l.detach().mean(3)?.mean(2))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let cat = Tensor::cat(&pooled, 1)?.to_dtype(candle_core::DType::F64)?;
        Ok(cat.to_vec2::<f64>()?)
    }
}

/// Flattened pixels as the embedding (AED then equals per-frame L2).
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn embed(&self, frames: &Tensor) -> Result<Vec<Vec<f64>>> {
        let b = frames.dim(0)?;
        Ok(frames
            .flatten_from(1)?
            .to_dtype(candle_core::DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .take(b)
            .collect())
    }
}

/// AKD over paired frame lists; returns `(mean distance, excluded frames)`.
/// Frames where either side has a missing landmark are excluded.
pub fn metric_akd(
    generated: &[&[f32]],
    ground_truth: &[&[f32]],
    size: usize,
    landmarker: &dyn Landmarker,
) -> Result<(Option<f64>, usize)> {
    if generated.len() != ground_truth.len() {
        return Err(Error::Argument("frame counts differ".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (g, t) in generated.iter().zip(ground_truth) {
        match (landmarker.landmarks(g, size), landmarker.landmarks(t, size)) {
            (Some(a), Some(b)) if a.len() == b.len() && !a.is_empty() => {
                let d: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .sum::<f64>()
                    / a.len() as f64;
                total += d;
                used += 1;
            }
            _ => excluded += 1,
        }
    }
    Ok(((used > 0).then(|| total / used as f64), excluded))
}

/// Mean Euclidean distance between embeddings of paired frames.
pub fn metric_aed(generated: &Tensor, ground_truth: &Tensor, embedder: &dyn Embedder) -> Result<f64> {
    let a = embedder.embed(generated)?;
    let b = embedder.embed(ground_truth)?;
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument("frame counts differ".into()));
    }
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub n_frames: usize,
    pub psnr: f64,
    pub l1: f64,
    pub akd: Option<f64>,
    pub akd_excluded: usize,
    pub aed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub psnr: f64,
    pub l1: f64,
    /// Mean over videos with at least one usable frame.
    pub akd: Option<f64>,
    pub akd_excluded: usize,
    pub aed: Option<f64>,
}

/// Versioned metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub aggregate: AggregateMetrics,
    pub videos: Vec<VideoMetrics>,
    /// Extra metrics from plugins, keyed by name.
    pub plugins: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores generated videos against ground truth matched by id.
pub fn evaluate(
    generated: &[VideoFrames],
    ground_truth: &[VideoFrames],
    size: usize,
    landmarker: &dyn Landmarker,
    embedder: Option<&dyn Embedder>,
) -> Result<MetricReport> {
    let mut videos = Vec::with_capacity(generated.len());
    for g in generated {
        let t = ground_truth
            .iter()
            .find(|t| t.id == g.id)
            .ok_or_else(|| Error::Argument(format!("no ground truth for video {}", g.id)))?;
        if g.frames.len() != t.frames.len() || g.frames.is_empty() {
            return Err(Error::Argument(format!("video {}: frame counts differ", g.id)));
        }
        let n = g.frames.len() as f64;
        let mut psnr = 0.0;
        let mut l1 = 0.0;
        for (a, b) in g.frames.iter().zip(&t.frames) {
            psnr += metric_psnr(a, b)?;
            l1 += metric_l1(a, b)?;
        }
        let gs: Vec<&[f32]> = g.frames.iter().map(Vec::as_slice).collect();
        let ts: Vec<&[f32]> = t.frames.iter().map(Vec::as_slice).collect();
        let (akd, akd_excluded) = metric_akd(&gs, &ts, size, landmarker)?;
        let aed = match embedder {
            Some(e) => Some(metric_aed(
                &FrameDataset::to_tensor(&gs, size, &Device::Cpu)?,
                &FrameDataset::to_tensor(&ts, size, &Device::Cpu)?,
                e,
            )?),
            None => None,
        };
        videos.push(VideoMetrics {
            id: g.id.clone(),
            n_frames: g.frames.len(),
            psnr: psnr / n,
            l1: l1 / n,
            akd,
            akd_excluded,
            aed,
        });
    }
    let aggregate = AggregateMetrics {
        psnr: mean(videos.iter().map(|v| v.psnr)).unwrap_or(0.0),
        l1: mean(videos.iter().map(|v| v.l1)).unwrap_or(0.0),
        akd: mean(videos.iter().filter_map(|v| v.akd)),
        akd_excluded: videos.iter().map(|v| v.akd_excluded).sum(),
        aed: mean(videos.iter().filter_map(|v| v.aed)),
    };
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        aggregate,
        videos,
        plugins: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = vec![0.5f32; 12];
        assert_eq!(metric_psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = vec![0.6f32; 12];
        // MSE = 0.01 up to f32 rounding of 0.6 - 0.5.
        assert!((metric_psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(metric_psnr(&a, &b[..6]).is_err());
    }

    #[test]
    fn missing_part_excludes_the_frame() {
        let blank = vec![0.2f32; 16 * 16 * 3];
        let lm = ColorLandmarker::default();
        assert!(lm.landmarks(&blank, 16).is_none());
        let (akd, excluded) = metric_akd(&[&blank], &[&blank], 16, &lm).unwrap();
        assert_eq!((akd, excluded), (None, 1));
    }
}
