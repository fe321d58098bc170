//! Full generator: estimator, compensation modules, codebooks, encoder and
//! decoder, plus the discriminator, all backed by one [`ParamStore`].

use candle_core::{DType, Device, Tensor};

use crate::acc::{AppearanceCompensation, AppearanceStep};
use crate::codebook::{Codebook, CodebookKind};
use crate::config::Config;
use crate::error::Result;
use crate::flowcore::{keypoint_heatmaps, warp, DenseMotion, FlowField, KeypointDetector, KeypointSet};
use crate::imagegen::{Discriminator, FeaturePyramid, ImageDecoder, ImageEncoder};
use crate::mcc::{MotionCompensation, MotionStep};
use crate::nn::ParamStore;

/// Parameter groups; each is the first component of its variables' names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Keypoint detector and dense motion network.
    Estimator,
    /// E_M, D_M, D_MR and the motion query block.
    Motion,
    MotionTransformer,
    /// Window projections and position embedding of ACC.
    Appearance,
    AppearanceTransformer,
    Codebooks,
    ImageEncoder,
    ImageDecoder,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Estimator,
        ParamGroup::Motion,
        ParamGroup::MotionTransformer,
        ParamGroup::Appearance,
        ParamGroup::AppearanceTransformer,
        ParamGroup::Codebooks,
        ParamGroup::ImageEncoder,
        ParamGroup::ImageDecoder,
        ParamGroup::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Estimator => "estimator",
            ParamGroup::Motion => "motion",
            ParamGroup::MotionTransformer => "motion_transformer",
            ParamGroup::Appearance => "appearance",
            ParamGroup::AppearanceTransformer => "appearance_transformer",
            ParamGroup::Codebooks => "codebooks",
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::ImageDecoder => "image_decoder",
            ParamGroup::Discriminator => "discriminator",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    /// Group of a full variable name.
    pub fn of_var(var_name: &str) -> Option<Self> {
        Self::from_name(var_name.split('.').next()?)
    }

    pub fn is_generator(self) -> bool {
        self != ParamGroup::Discriminator
    }
}

/// Everything one generator pass produces.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub source_keypoints: KeypointSet,
    pub driving_keypoints: KeypointSet,
    /// `M^0`.
    pub initial_flow: FlowField,
    /// `M^1..M^N`; equal to `M^0` when motion compensation is disabled.
    pub flows: Vec<FlowField>,
    pub motion_steps: Vec<MotionStep>,
    pub appearance_steps: Vec<AppearanceStep>,
    pub source_features: FeaturePyramid,
    pub warped: FeaturePyramid,
    pub compensated: FeaturePyramid,
    /// `I_g`.
    pub image: Tensor,
    /// `I_g^1`.
    pub image_lowres: Tensor,
    pub singular_jacobians: usize,
}

#[derive(Debug, Clone)]
pub struct FaceAnimator {
    cfg: Config,
    store: ParamStore,
    pub detector: KeypointDetector,
    pub dense_motion: DenseMotion,
    pub motion: MotionCompensation,
    pub appearance: AppearanceCompensation,
    pub motion_codebook: Codebook,
    pub appearance_codebook: Codebook,
    pub encoder: ImageEncoder,
    pub decoder: ImageDecoder,
    pub discriminator: Discriminator,
}

impl FaceAnimator {
    pub fn new(cfg: &Config, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = if cfg.train.float64 { DType::F64 } else { DType::F32 };
        let store = ParamStore::new(seed, dtype, device);
        let m = &cfg.model;
        let g = |g: ParamGroup| store.pp(g.name());
        let est = g(ParamGroup::Estimator);
        let cbs = g(ParamGroup::Codebooks);
        Ok(Self {
            detector: KeypointDetector::new(&est.pp("keypoints"), m)?,
            dense_motion: DenseMotion::new(&est.pp("dense"), m)?,
            motion: MotionCompensation::new(&g(ParamGroup::Motion), &g(ParamGroup::MotionTransformer), cfg)?,
            appearance: AppearanceCompensation::new(
                &g(ParamGroup::Appearance),
                &g(ParamGroup::AppearanceTransformer),
                cfg,
            )?,
            motion_codebook: Codebook::new(
                &cbs.pp("motion"),
                CodebookKind::Motion,
                m.motion_codes,
                m.motion_dim,
                m.n_scales,
            )?,
            appearance_codebook: Codebook::new(
                &cbs.pp("appearance"),
                CodebookKind::Appearance,
                m.appearance_codes,
                m.appearance_dim,
                m.n_scales,
            )?,
            encoder: ImageEncoder::new(&g(ParamGroup::ImageEncoder), cfg)?,
            decoder: ImageDecoder::new(&g(ParamGroup::ImageDecoder), cfg)?,
            discriminator: Discriminator::new(&g(ParamGroup::Discriminator), cfg)?,
            cfg: cfg.clone(),
            store,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Full pass from a source and a driving frame. With `with_targets`
    /// the driving frame is also encoded to compute the appearance code loss.
    pub fn generate(&self, source: &Tensor, driving: &Tensor, with_targets: bool) -> Result<GeneratorOutput> {
        let m = &self.cfg.model;
        let source = source.to_dtype(self.dtype())?;
        let driving = driving.to_dtype(self.dtype())?;
        let src_kp = self.detector.detect(&source)?;
        let drv_kp = self.detector.detect(&driving)?;
        let dense = self.dense_motion.forward(&src_kp, &drv_kp, &source)?;
        let side = self.motion.latent_side();
        let kp_feature = keypoint_heatmaps(&drv_kp, (side, side), m.keypoint_sigma2)?.maps;

        let src_feat = self.encoder.encode_image(&source)?;
        // The appearance code loss only trains codes and window projections.
        let drv_feat = if with_targets && m.use_appearance_codebook {
            Some(self.encoder.encode_image(&driving)?.detach())
        } else {
            None
        };

        let mut flows = Vec::with_capacity(m.n_scales);
        let mut motion_steps = Vec::new();
        let mut appearance_steps = Vec::new();
        let mut warped = Vec::with_capacity(m.n_scales);
        let mut compensated: Vec<Tensor> = Vec::with_capacity(m.n_scales);
        let mut prev = dense.flow.clone();
        for scale in 1..=m.n_scales {
            let flow = if m.use_motion_codebook {
                let context = if scale == 1 {
                    warp(src_feat.level(1), &dense.flow)?
                } else {
                    compensated[scale - 2].clone()
                };
                let view = self.motion_codebook.allocate(scale)?;
                let step = self.motion.compensate_motion(&prev, &context, &kp_feature, &view)?;
                let flow = step.flow.clone();
                motion_steps.push(step);
                flow
            } else {
                prev.clone()
            };
            let f_w = warp(src_feat.level(scale), &flow)?;
            let f_c = if m.use_appearance_codebook {
                let view = self.appearance_codebook.allocate(scale)?;
                let target = drv_feat.as_ref().map(|p| p.level(scale));
                let step = self.appearance.compensate_appearance(&f_w, &view, target)?;
                let out = step.compensated.clone();
                appearance_steps.push(step);
                out
            } else {
                f_w.clone()
            };
            warped.push(f_w);
            compensated.push(f_c);
            flows.push(flow.clone());
            prev = flow;
        }
        let compensated = FeaturePyramid::new(compensated);
        let image = self.decoder.decode_image(&compensated)?;
        let image_lowres = self.decoder.decode_image_lowres_only(compensated.level(1))?;
        Ok(GeneratorOutput {
            source_keypoints: src_kp,
            driving_keypoints: drv_kp,
            initial_flow: dense.flow,
            flows,
            motion_steps,
            appearance_steps,
            source_features: src_feat,
            warped: FeaturePyramid::new(warped),
            compensated,
            image,
            image_lowres,
            singular_jacobians: dense.singular_jacobians,
        })
    }

    /// Generated frame only.
    pub fn animate(&self, source: &Tensor, driving: &Tensor) -> Result<Tensor> {
        Ok(self.generate(source, driving, false)?.image)
    }
}
