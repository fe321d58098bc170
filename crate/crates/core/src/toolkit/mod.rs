//! Data generation, loading, image and dump I/O, and evaluation metrics.

pub mod dataset;
pub mod io;
pub mod metrics;
pub mod sprites;

pub use dataset::{
    generate_sprite_dataset, sprite_dataset, FrameDataset, Split, SpriteDatasetSpec, VideoFrames,
};
pub use metrics::{
    evaluate, metric_aed, metric_akd, metric_l1, metric_psnr, ColorLandmarker, Embedder,
    EncoderEmbedder, Landmarker, MetricReport, PixelEmbedder,
};
pub use sprites::{SpriteScene, SpriteVideo};
