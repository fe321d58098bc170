//! Run configuration.
//!
//! A [`Config`] fully determines a run. It is stored as TOML; [`Config::to_toml`]
//! writes the file with comments naming the symbol each hyperparameter plays in
//! the method (K, T, d_m, d_a, N, ...).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input/output image side.
    pub image_size: usize,
    /// Number of compensation scales, N.
    pub n_scales: usize,
    pub n_keypoints: usize,
    /// Gaussian variance of keypoint heatmaps in normalized units.
    pub keypoint_sigma2: f64,
    /// Softmax temperature of the keypoint heatmaps.
    pub keypoint_temperature: f64,
    /// Width of the keypoint detector and dense motion network.
    pub estimator_channels: usize,
    /// The estimator runs at image_size / estimator_downsample.
    pub estimator_downsample: usize,
    /// Side of the motion flows M^i.
    pub flow_size: usize,
    /// Downsampling factor of E_M; latent side = flow_size / motion_latent_stride.
    pub motion_latent_stride: usize,
    pub motion_encoder_channels: usize,
    /// Motion codebook size, K.
    pub motion_codes: usize,
    /// Motion code length, d_m.
    pub motion_dim: usize,
    /// Query width of T_M, d_q.
    pub query_dim: usize,
    /// Transformer layers of T_M, L_M.
    pub motion_layers: usize,
    pub motion_heads: usize,
    /// Appearance codebook size, T.
    pub appearance_codes: usize,
    /// Appearance code length, d_a.
    pub appearance_dim: usize,
    /// Window grid side, h_a = w_a.
    pub window: usize,
    /// Transformer layers of T_A, L_A.
    pub appearance_layers: usize,
    pub appearance_heads: usize,
    /// Channels of the image feature pyramid, coarse (scale 1) to fine (scale N).
    pub encoder_channels: Vec<usize>,
    pub decoder_res_blocks: usize,
    pub discriminator_channels: usize,
    pub discriminator_depth: usize,
    pub discriminator_scales: usize,
    /// Enables motion codebook compensation (MCC). Off gives M^i = M^0.
    pub use_motion_codebook: bool,
    /// Enables appearance codebook compensation (ACC). Off gives F_c^i = F_w^i.
    pub use_appearance_codebook: bool,
    /// Update codebooks with exponential moving averages instead of gradients.
    pub codebook_ema: bool,
    pub codebook_ema_decay: f64,
    /// Re-seed codes unused for this many steps from current encoder outputs (0 = off).
    pub dead_code_restart_steps: u64,
    /// Let the flow reconstruction term reach E_M through the straight-through
    /// estimator (standard VQ-VAE routing). Off keeps E_M on the commitment
    /// term only.
    pub motion_straight_through: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_scales: 2,
            n_keypoints: 10,
            keypoint_sigma2: 0.01,
            keypoint_temperature: 0.1,
            estimator_channels: 16,
            estimator_downsample: 2,
            flow_size: 64,
            motion_latent_stride: 4,
            motion_encoder_channels: 16,
            motion_codes: 64,
            motion_dim: 16,
            query_dim: 32,
            motion_layers: 2,
            motion_heads: 4,
            appearance_codes: 64,
            appearance_dim: 64,
            window: 16,
            appearance_layers: 2,
            appearance_heads: 4,
            encoder_channels: vec![32, 16],
            decoder_res_blocks: 1,
            discriminator_channels: 16,
            discriminator_depth: 4,
            discriminator_scales: 2,
            use_motion_codebook: true,
            use_appearance_codebook: true,
            codebook_ema: false,
            codebook_ema_decay: 0.99,
            dead_code_restart_steps: 0,
            motion_straight_through: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// lambda_adv
    pub lambda_adv: f64,
    /// lambda^1, weight of the reconstruction loss on the scale-1-only image.
    pub lambda_1: f64,
    /// lambda_recon,m
    pub lambda_recon_m: f64,
    /// beta, commitment weight of both code-level losses.
    pub beta: f64,
    pub lambda_eq: f64,
    /// Adds a Jacobian term to the equivariance loss.
    pub jacobian_equivariance: bool,
    pub lambda_kpd: f64,
    /// Margin delta of the keypoint distance loss, normalized units.
    pub kpd_margin: f64,
    pub perceptual_weight: f64,
    /// Image pyramid scales of the perceptual loss.
    pub perceptual_scales: Vec<f64>,
    pub tps_sigma_affine: f64,
    pub tps_sigma_tps: f64,
    pub tps_points: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 0.8,
            lambda_1: 0.5,
            lambda_recon_m: 32.0,
            beta: 0.25,
            lambda_eq: 1.0,
            jacobian_equivariance: false,
            lambda_kpd: 1.0,
            kpd_margin: 0.2,
            perceptual_weight: 1.0,
            perceptual_scales: vec![1.0, 0.5, 0.25],
            tps_sigma_affine: 0.05,
            tps_sigma_tps: 0.005,
            tps_points: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub discriminator_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Run the gradient-isolation audit every this many steps (0 = never).
    pub debug_every: u64,
    /// Use float64 tensors (gradient checks); training uses float32.
    pub float64: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-4,
            discriminator_learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            seed: 0,
            log_every: 50,
            debug_every: 0,
            float64: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Small configuration that trains on one CPU core.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-size configuration with the published hyperparameters.
    pub fn full() -> Self {
        Self {
            model: ModelConfig {
                image_size: 256,
                n_scales: 4,
                estimator_downsample: 4,
                estimator_channels: 64,
                flow_size: 64,
                motion_latent_stride: 2,
                motion_encoder_channels: 64,
                motion_codes: 1024,
                motion_dim: 32,
                query_dim: 128,
                appearance_codes: 1024,
                appearance_dim: 256,
                window: 32,
                encoder_channels: vec![256, 128, 128, 64],
                decoder_res_blocks: 2,
                discriminator_channels: 64,
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            train: TrainConfig {
                steps: 250_000,
                batch_size: 16,
                learning_rate: 8e-5,
                discriminator_learning_rate: 8e-5,
                ..TrainConfig::default()
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Serializes to TOML with a comment header mapping keys to symbols.
    pub fn to_toml(&self) -> String {
        let body = toml::to_string(self).expect("config serializes");
        format!("{SYMBOL_LEGEND}\n{body}")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Side of the square motion latent, h_m = w_m.
    pub fn motion_latent_size(&self) -> usize {
        self.model.flow_size / self.model.motion_latent_stride
    }

    /// Pixel side of pyramid level `scale` (1-based, coarse to fine).
    pub fn level_size(&self, scale: usize) -> usize {
        self.model.image_size >> (self.model.n_scales - scale)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.n_scales == 0 {
            return bad("n_scales must be at least 1".into());
        }
        if m.encoder_channels.len() != m.n_scales {
            return bad(format!(
                "encoder_channels has {} entries, expected n_scales = {}",
                m.encoder_channels.len(),
                m.n_scales
            ));
        }
        if m.image_size % (1 << (m.n_scales - 1)) != 0 {
            return bad("image_size must be divisible by 2^(n_scales-1)".into());
        }
        if m.motion_codes % m.n_scales != 0 || m.appearance_codes % m.n_scales != 0 {
            return bad("codebook sizes must be divisible by n_scales".into());
        }
        if m.motion_latent_stride == 0
            || !m.motion_latent_stride.is_power_of_two()
            || m.flow_size % m.motion_latent_stride != 0
        {
            return bad("motion_latent_stride must be a power of two dividing flow_size".into());
        }
        if m.estimator_downsample == 0 || m.image_size % m.estimator_downsample != 0 {
            return bad("estimator_downsample must divide image_size".into());
        }
        if (m.image_size / m.estimator_downsample) % 4 != 0 {
            return bad("estimator resolution must be divisible by 4".into());
        }
        for scale in 1..=m.n_scales {
            let side = self.level_size(scale);
            if side % m.window != 0 || side < m.window {
                return bad(format!(
                    "pyramid level {scale} ({side}px) is not divisible by window {}",
                    m.window
                ));
            }
        }
        if m.query_dim % m.motion_heads != 0 || m.appearance_dim % m.appearance_heads != 0 {
            return bad("transformer widths must be divisible by head counts".into());
        }
        if m.n_keypoints == 0 {
            return bad("n_keypoints must be positive".into());
        }
        let l = &self.loss;
        let weights = [
            l.lambda_adv,
            l.lambda_1,
            l.lambda_recon_m,
            l.beta,
            l.lambda_eq,
            l.lambda_kpd,
            l.kpd_margin,
            l.perceptual_weight,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

const SYMBOL_LEGEND: &str = "\
# facecomp run configuration
#
# [model]
#   n_scales            N       compensation scales
#   flow_size           h = w   side of the motion flows M^i
#   motion_codes        K       motion codebook size
#   motion_dim          d_m     motion code length
#   query_dim           d_q     T_M width
#   motion_layers       L_M     T_M depth
#   appearance_codes    T       appearance codebook size
#   appearance_dim      d_a     appearance code length
#   window              h_a=w_a window grid side
#   appearance_layers   L_A     T_A depth
# [loss]
#   lambda_adv          lambda_adv      adversarial weight
#   lambda_1            lambda^1        weight of L_recon(I_d, I_g^1)
#   lambda_recon_m      lambda_recon,m  motion flow reconstruction weight
#   beta                beta            commitment weight
# [train]
#   learning_rate       Adam step size (8e-5 at full scale)
";
