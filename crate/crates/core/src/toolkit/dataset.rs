//! Frame datasets: synthetic generation and the on-disk loader.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! index.json                {"format": "facecomp-frames", "version": 1, "size": 64,
//!                            "videos": [{"id": "v0000", "n_frames": 16, "split": "train"}, ...]}
//! <id>/0000.png ...         RGB frames, size x size
//! <id>/landmarks.json       optional, per-frame [[x, y]; 5] in pixels
//! ```
//!
//! Any directory of frame folders with such an index can be loaded; the
//! generator below only adds the landmark files.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_png, write_png};
use super::sprites::{SpriteVideo, N_LANDMARKS};
use crate::error::{Error, Result};
use crate::training::Batch;

pub const INDEX_FORMAT: &str = "facecomp-frames";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub n_frames: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub size: usize,
    pub videos: Vec<VideoEntry>,
}

pub type Landmarks = [[f64; 2]; N_LANDMARKS];

/// Frames of one video, each interleaved RGB `f32` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub id: String,
    pub split: Split,
    pub frames: Vec<Vec<f32>>,
    pub landmarks: Option<Vec<Landmarks>>,
}

/// In-memory dataset.
#[derive(Debug, Clone)]
pub struct FrameDataset {
    pub size: usize,
    pub videos: Vec<VideoFrames>,
}

pub fn frame_path(root: &Path, id: &str, frame: usize) -> PathBuf {
    root.join(id).join(format!("{frame:04}.png"))
}

/// Options of the synthetic generator.
#[derive(Debug, Clone, Copy)]
pub struct SpriteDatasetSpec {
    pub seed: u64,
    pub n_videos: usize,
    pub n_frames: usize,
    pub size: usize,
    /// Fraction of videos (rounded up) held out as the test split.
    pub test_fraction: f64,
}

/// Seed of video `index` in a dataset generated from `seed`.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub fn sprite_videos(spec: &SpriteDatasetSpec) -> Vec<SpriteVideo> {
    (0..spec.n_videos)
        .map(|i| SpriteVideo::generate(video_seed(spec.seed, i), spec.n_frames, spec.size))
        .collect()
}

fn n_test(spec: &SpriteDatasetSpec) -> usize {
    ((spec.n_videos as f64 * spec.test_fraction).ceil() as usize).min(spec.n_videos)
}

/// Renders the sprite dataset in memory (no disk round trip).
pub fn sprite_dataset(spec: &SpriteDatasetSpec) -> FrameDataset {
    let test_from = spec.n_videos - n_test(spec);
    let videos = sprite_videos(spec)
        .into_iter()
        .enumerate()
        .map(|(i, v)| VideoFrames {
            id: format!("v{i:04}"),
            split: if i >= test_from { Split::Test } else { Split::Train },
            frames: (0..v.n_frames())
                .map(|f| {
                    // Quantize like a PNG round trip so memory and disk agree.
                    v.scene(f)
                        .render_u8()
                        .iter()
                        .map(|b| *b as f32 / 255.0)
                        .collect()
                })
                .collect(),
            landmarks: Some((0..v.n_frames()).map(|f| v.scene(f).landmarks()).collect()),
        })
        .collect();
    FrameDataset {
        size: spec.size,
        videos,
    }
}

/// Writes the sprite dataset to `root`.
pub fn generate_sprite_dataset(root: &Path, spec: &SpriteDatasetSpec) -> Result<DatasetIndex> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let test_from = spec.n_videos - n_test(spec);
    let mut entries = Vec::with_capacity(spec.n_videos);
    for (i, video) in sprite_videos(spec).iter().enumerate() {
        let id = format!("v{i:04}");
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut landmarks = Vec::with_capacity(video.n_frames());
        for f in 0..video.n_frames() {
            let scene = video.scene(f);
            write_png(&frame_path(root, &id, f), &scene.render_u8(), spec.size, spec.size)?;
            landmarks.push(scene.landmarks());
        }
        let lm_path = dir.join("landmarks.json");
        std::fs::write(&lm_path, serde_json::to_string(&landmarks)?).map_err(|e| Error::io(&lm_path, e))?;
        let pose_path = dir.join("poses.json");
        std::fs::write(&pose_path, serde_json::to_string_pretty(video)?).map_err(|e| Error::io(&pose_path, e))?;
        entries.push(VideoEntry {
            id,
            n_frames: video.n_frames(),
            split: if i >= test_from { Split::Test } else { Split::Train },
        });
    }
    let index = DatasetIndex {
        format: INDEX_FORMAT.into(),
        version: INDEX_VERSION,
        size: spec.size,
        videos: entries,
    };
    let path = root.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    let path = root.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if index.format != INDEX_FORMAT || index.version != INDEX_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported dataset index {} v{}",
            path.display(),
            index.format,
            index.version
        )));
    }
    Ok(index)
}

/// Reads the frames of one video folder.
pub fn load_video(root: &Path, entry: &VideoEntry, size: usize) -> Result<VideoFrames> {
    let frames = (0..entry.n_frames)
        .map(|f| {
            let (data, w, h) = read_png(&frame_path(root, &entry.id, f))?;
            if (w, h) != (size, size) {
                return Err(Error::Config(format!(
                    "{}: frame {f} is {w}x{h}, expected {size}x{size}",
                    entry.id
                )));
            }
            Ok(data)
        })
        .collect::<Result<Vec<_>>>()?;
    let lm_path = root.join(&entry.id).join("landmarks.json");
    let landmarks = if lm_path.exists() {
        let text = std::fs::read_to_string(&lm_path).map_err(|e| Error::io(&lm_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    Ok(VideoFrames {
        id: entry.id.clone(),
        split: entry.split,
        frames,
        landmarks,
    })
}

/// Reads the PNG frames of one folder in file-name order; returns the
/// frames and their square side.
pub fn load_frame_folder(dir: &Path) -> Result<(Vec<Vec<f32>>, usize)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("{}: no PNG frames", dir.display())));
    }
    let mut size = 0;
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let (data, w, h) = read_png(p)?;
        if w != h || (size != 0 && w != size) {
            return Err(Error::Config(format!(
                "{}: frames must be square and equally sized, got {w}x{h}",
                p.display()
            )));
        }
        size = w;
        frames.push(data);
    }
    Ok((frames, size))
}

/// Reads every sub-folder of `root` holding PNG frames as one video, keyed
/// by folder name. Returns the videos in name order and the frame side.
pub fn load_video_folders(root: &Path) -> Result<(Vec<VideoFrames>, usize)> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut size = 0;
    let mut videos = Vec::new();
    for dir in dirs {
        let Ok((frames, s)) = load_frame_folder(&dir) else {
            continue;
        };
        if size != 0 && s != size {
            return Err(Error::Config(format!("{}: frame size {s} differs from {size}", dir.display())));
        }
        size = s;
        videos.push(VideoFrames {
            id: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            split: Split::Test,
            frames,
            landmarks: None,
        });
    }
    if videos.is_empty() {
        return Err(Error::Config(format!("{}: no video folders with PNG frames", root.display())));
    }
    Ok((videos, size))
}

impl FrameDataset {
    pub fn load(root: &Path) -> Result<Self> {
        let index = read_index(root)?;
        let videos = index
            .videos
            .iter()
            .map(|e| load_video(root, e, index.size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            size: index.size,
            videos,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&VideoFrames> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }

    /// Stacks interleaved RGB frames into a `(B, 3, H, W)` tensor.
    pub fn to_tensor(frames: &[&[f32]], size: usize, device: &Device) -> Result<Tensor> {
        let b = frames.len();
        let mut data = Vec::with_capacity(b * 3 * size * size);
        for f in frames {
            data.extend_from_slice(f);
        }
        Ok(Tensor::from_vec(data, (b, size, size, 3), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Random same-video (source, driving) pairs from `split`.
    pub fn sample_batch<R: Rng>(&self, split: Split, batch: usize, rng: &mut R, device: &Device) -> Result<Batch> {
        let pool = self.split(split);
        if pool.is_empty() {
            return Err(Error::Config(format!("dataset has no {split:?} videos")));
        }
        let mut src = Vec::with_capacity(batch);
        let mut drv = Vec::with_capacity(batch);
        for _ in 0..batch {
            let v = pool[rng.random_range(0..pool.len())];
            let n = v.frames.len();
            src.push(v.frames[rng.random_range(0..n)].as_slice());
            drv.push(v.frames[rng.random_range(0..n)].as_slice());
        }
        Ok(Batch {
            source: Self::to_tensor(&src, self.size, device)?,
            driving: Self::to_tensor(&drv, self.size, device)?,
        })
    }
}
