#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use facecomp::toolkit::{sprite_dataset, FrameDataset, SpriteDatasetSpec};
use facecomp::training::Batch;
use facecomp::Config;

/// Small model that trains a step in well under a second.
pub fn tiny_config() -> Config {
    let mut cfg = Config::desk();
    let m = &mut cfg.model;
    m.image_size = 32;
    m.n_keypoints = 4;
    m.estimator_channels = 8;
    m.flow_size = 32;
    m.motion_latent_stride = 4;
    m.motion_encoder_channels = 8;
    m.motion_codes = 8;
    m.motion_dim = 4;
    m.query_dim = 8;
    m.motion_layers = 1;
    m.motion_heads = 2;
    m.appearance_codes = 8;
    m.appearance_dim = 8;
    m.window = 4;
    m.appearance_layers = 1;
    m.appearance_heads = 2;
    m.encoder_channels = vec![8, 8];
    m.discriminator_channels = 8;
    m.discriminator_depth = 2;
    m.discriminator_scales = 1;
    cfg.train.batch_size = 2;
    cfg.train.log_every = 1;
    cfg
}

pub fn tiny_f64() -> Config {
    let mut cfg = tiny_config();
    cfg.train.float64 = true;
    cfg
}

pub fn tiny_dataset(size: usize) -> FrameDataset {
    sprite_dataset(&SpriteDatasetSpec {
        seed: 3,
        n_videos: 4,
        n_frames: 4,
        size,
        test_fraction: 0.25,
    })
}

pub fn random_batch(cfg: &Config, seed: u64) -> Batch {
    let s = cfg.model.image_size;
    let b = cfg.train.batch_size;
    let n = b * 3 * s * s;
    let gen = |k: u64| -> Vec<f64> {
        (0..n as u64)
            .map(|i| ((i.wrapping_mul(2654435761).wrapping_add(k * 97 + seed * 7919)) % 1000) as f64 / 1000.0)
            .collect()
    };
    let dtype = if cfg.train.float64 { DType::F64 } else { DType::F32 };
    let t = |v: Vec<f64>| {
        Tensor::from_vec(v, (b, 3, s, s), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    };
    Batch {
        source: t(gen(1)),
        driving: t(gen(2)),
    }
}
