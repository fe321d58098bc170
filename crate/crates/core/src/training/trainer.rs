//! Training state and the alternating generator/discriminator step.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{
    loss_adversarial, loss_equivariance, loss_keypoint_distance, loss_reconstruction, PerceptualExtractor,
    RandomPerceptual,
};
use super::model::{FaceAnimator, GeneratorOutput, ParamGroup};
use super::optim::Adam;
use crate::codebook::{restart_codes, Codebook, EmaState, UsageStats};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::flowcore::RandomTransform;
use crate::nn::{self, scalar};
use crate::toolkit::dataset::{FrameDataset, Split};

/// Names of the seven weighted objective terms, in logging order.
pub const LOSS_TERMS: [&str; 7] = ["recon", "adv", "eq", "kpd", "vq_motion", "vq_appearance", "recon_lowres"];

/// Source and driving frames, each `(B, 3, H, W)` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Tensor,
    pub driving: Tensor,
}

/// Scalar summary of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Weighted terms keyed by [`LOSS_TERMS`].
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub discriminator: f64,
    /// Unweighted L1 between `I_g` and `I_d`.
    pub recon_l1: f64,
    pub singular_jacobians: usize,
}

/// Weighted loss tensors of one generator pass.
pub struct GeneratorLosses {
    pub terms: Vec<(&'static str, Tensor)>,
    pub total: Tensor,
    pub recon_l1: Tensor,
}

/// Deterministic per-step random stream.
pub fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(step as u128 * 4096);
    rng
}

pub const STREAM_DATA: u64 = 1;
pub const STREAM_TRANSFORM: u64 = 2;
pub const STREAM_RESTART: u64 = 3;

/// Model, optimizer state and bookkeeping of a run.
pub struct TrainState {
    pub model: FaceAnimator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub seed: u64,
    pub motion_usage: UsageStats,
    pub appearance_usage: UsageStats,
    /// Step at which each code was last selected, per codebook.
    pub last_used: [Vec<u64>; 2],
    ema: Option<[EmaState; 2]>,
    perceptual: Box<dyn PerceptualExtractor>,
}

/// One row of the gradient-isolation audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub term: String,
    pub group: String,
    pub expected_zero: bool,
    pub grad_norm: f64,
}

impl AuditEntry {
    pub fn violated(&self) -> bool {
        self.expected_zero && self.grad_norm != 0.0
    }
}

impl TrainState {
    pub fn new(cfg: &Config, device: &Device) -> Result<Self> {
        let model = FaceAnimator::new(cfg, cfg.train.seed, device)?;
        let perceptual = Box::new(RandomPerceptual::new(model.dtype(), device)?);
        Self::with_model(model, perceptual)
    }

    /// Uses a custom perceptual feature extractor.
    pub fn with_model(model: FaceAnimator, perceptual: Box<dyn PerceptualExtractor>) -> Result<Self> {
        let cfg = model.config().clone();
        let t = &cfg.train;
        let ema = if cfg.model.codebook_ema {
            Some([
                EmaState::new(&model.motion_codebook, cfg.model.codebook_ema_decay)?,
                EmaState::new(&model.appearance_codebook, cfg.model.codebook_ema_decay)?,
            ])
        } else {
            None
        };
        Ok(Self {
            motion_usage: UsageStats::for_codebook(&model.motion_codebook),
            appearance_usage: UsageStats::for_codebook(&model.appearance_codebook),
            last_used: [
                vec![0; model.motion_codebook.n_codes()],
                vec![0; model.appearance_codebook.n_codes()],
            ],
            opt_g: Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2),
            opt_d: Adam::new(t.discriminator_learning_rate, t.adam_beta1, t.adam_beta2),
            step: 0,
            seed: t.seed,
            ema,
            perceptual,
            model,
        })
    }

    pub fn config(&self) -> &Config {
        self.model.config()
    }

    pub fn ema_states(&self) -> Option<&[EmaState; 2]> {
        self.ema.as_ref()
    }

    pub fn ema_states_mut(&mut self) -> Option<&mut [EmaState; 2]> {
        self.ema.as_mut()
    }

    /// Generator objective for one pass. `transform` drives the equivariance term.
    pub fn generator_losses(
        &self,
        batch: &Batch,
        out: &GeneratorOutput,
        transform: &RandomTransform,
    ) -> Result<GeneratorLosses> {
        let cfg = self.config();
        let l = &cfg.loss;
        let driving = batch.driving.to_dtype(self.model.dtype())?;
        let recon = loss_reconstruction(
            &out.image,
            &driving,
            self.perceptual.as_ref(),
            &l.perceptual_scales,
            l.perceptual_weight,
        )?;
        let recon_lowres = loss_reconstruction(
            &out.image_lowres,
            &driving,
            self.perceptual.as_ref(),
            &l.perceptual_scales,
            l.perceptual_weight,
        )?;
        let zero = recon.l1.zeros_like()?;
        let adv = if l.lambda_adv > 0.0 {
            let fake = self.model.discriminator.discriminate(&out.image)?;
            (loss_adversarial(&fake, None)?.0 * l.lambda_adv)?
        } else {
            zero.clone()
        };
        let eq = (loss_equivariance(
            &self.model.detector,
            &driving,
            &out.driving_keypoints,
            transform,
            l.jacobian_equivariance,
        )? * l.lambda_eq)?;
        let kpd = (((loss_keypoint_distance(&out.source_keypoints, l.kpd_margin)?
            + loss_keypoint_distance(&out.driving_keypoints, l.kpd_margin)?)?
            * 0.5)?
            * l.lambda_kpd)?;
        let mut vq_m = zero.clone();
        for s in &out.motion_steps {
            vq_m = (vq_m + &s.loss.total)?;
        }
        let mut vq_a = zero.clone();
        for s in &out.appearance_steps {
            if let Some(loss) = &s.loss {
                vq_a = (vq_a + &loss.total)?;
            }
        }
        let terms = vec![
            ("recon", recon.total),
            ("adv", adv),
            ("eq", eq),
            ("kpd", kpd),
            ("vq_motion", vq_m),
            ("vq_appearance", vq_a),
            ("recon_lowres", (recon_lowres.total * l.lambda_1)?),
        ];
        let mut total = zero;
        for (_, t) in &terms {
            total = (total + t)?;
        }
        Ok(GeneratorLosses {
            terms,
            total,
            recon_l1: recon.l1,
        })
    }

    fn generator_vars(&self) -> Vec<(String, Var)> {
        let ema = self.ema.is_some();
        self.model
            .store()
            .vars()
            .into_iter()
            .filter(|(name, _)| match ParamGroup::of_var(name) {
                Some(ParamGroup::Discriminator) | None => false,
                Some(ParamGroup::Codebooks) => !ema,
                Some(_) => true,
            })
            .collect()
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let cfg = self.config().clone();
        let step = self.step;
        let b = batch.driving.dim(0)?;
        let mut trng = step_rng(self.seed, step, STREAM_TRANSFORM);
        let transform = RandomTransform::sample(
            &mut trng,
            b,
            cfg.loss.tps_sigma_affine,
            cfg.loss.tps_sigma_tps,
            cfg.loss.tps_points,
        );
        let out = self.model.generate(&batch.source, &batch.driving, true)?;
        let losses = self.generator_losses(batch, &out, &transform)?;

        let mut terms = BTreeMap::new();
        for (name, t) in &losses.terms {
            terms.insert(name.to_string(), scalar(t)?);
        }
        let total = scalar(&losses.total)?;
        if !total.is_finite() || terms.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: serde_json::to_string(&terms)?,
            });
        }
        if cfg.train.debug_every > 0 && step % cfg.train.debug_every == 0 {
            let violations: Vec<_> = self
                .gradient_audit(&losses)?
                .into_iter()
                .filter(AuditEntry::violated)
                .collect();
            if !violations.is_empty() {
                return Err(Error::Argument(format!(
                    "gradient isolation violated at step {step}: {}",
                    serde_json::to_string(&violations)?
                )));
            }
        }

        let grads = losses.total.backward()?;
        let gvars = self.generator_vars();
        self.opt_g.step(&gvars, &grads)?;
        drop(grads);

        let mut d_value = 0.0;
        if cfg.loss.lambda_adv > 0.0 {
            let real = self
                .model
                .discriminator
                .discriminate(&batch.driving.to_dtype(self.model.dtype())?)?;
            let fake = self.model.discriminator.discriminate(&out.image.detach())?;
            let (_, d) = loss_adversarial(&fake, Some(&real))?;
            let d = d.expect("real logits given");
            d_value = scalar(&d)?;
            if !d_value.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("discriminator loss {d_value}"),
                });
            }
            let grads = d.backward()?;
            let dvars = self.model.store().group_vars(ParamGroup::Discriminator.name());
            self.opt_d.step(&dvars, &grads)?;
        }

        self.update_codebooks(&out)?;
        self.step += 1;
        Ok(StepReport {
            step,
            terms,
            total,
            discriminator: d_value,
            recon_l1: scalar(&losses.recon_l1)?,
            singular_jacobians: out.singular_jacobians,
        })
    }

    /// Usage bookkeeping, EMA code updates and dead-code restarts.
    fn update_codebooks(&mut self, out: &GeneratorOutput) -> Result<()> {
        let cfg = self.config().clone();
        let step = self.step;
        let mut motion_feats = Vec::new();
        for (k, s) in out.motion_steps.iter().enumerate() {
            let scale = k + 1;
            let idx = &s.quantization.indices;
            self.motion_usage.record(scale, idx);
            for &i in idx {
                self.last_used[0][i as usize] = step + 1;
            }
            let feats = nn::to_vec_f64(&s.encoded)?;
            if let Some(ema) = &mut self.ema {
                let cb = &self.model.motion_codebook;
                let var = codebook_var(&self.model, "motion")?;
                ema[0].update(cb, &var, &feats, idx, scale * cb.n_codes() / cb.n_scales())?;
            }
            motion_feats = feats;
        }
        let mut app_feats = Vec::new();
        for (k, s) in out.appearance_steps.iter().enumerate() {
            let (Some(q), Some(target)) = (&s.quantization, &s.target) else {
                continue;
            };
            let scale = k + 1;
            self.appearance_usage.record(scale, &q.indices);
            for &i in &q.indices {
                self.last_used[1][i as usize] = step + 1;
            }
            let feats = nn::to_vec_f64(&target.tokens)?;
            if let Some(ema) = &mut self.ema {
                let cb = &self.model.appearance_codebook;
                let var = codebook_var(&self.model, "appearance")?;
                ema[1].update(cb, &var, &feats, &q.indices, scale * cb.n_codes() / cb.n_scales())?;
            }
            app_feats = feats;
        }
        let patience = cfg.model.dead_code_restart_steps;
        if patience > 0 && (step + 1) % patience == 0 {
            let mut rng = step_rng(self.seed, step, STREAM_RESTART);
            for (which, feats) in [(0usize, motion_feats), (1, app_feats)] {
                if feats.is_empty() {
                    continue;
                }
                let dead: Vec<usize> = self.last_used[which]
                    .iter()
                    .enumerate()
                    .filter(|(_, &last)| step + 1 - last >= patience)
                    .map(|(k, _)| k)
                    .collect();
                let (cb, name): (&Codebook, _) = if which == 0 {
                    (&self.model.motion_codebook, "motion")
                } else {
                    (&self.model.appearance_codebook, "appearance")
                };
                restart_codes(cb, &codebook_var(&self.model, name)?, &dead, &feats, &mut rng)?;
                for k in dead {
                    self.last_used[which][k] = step + 1;
                }
            }
        }
        Ok(())
    }

    /// Gradient norm of every weighted term into every parameter group,
    /// with the groups that must receive none flagged.
    pub fn gradient_audit(&self, losses: &GeneratorLosses) -> Result<Vec<AuditEntry>> {
        let mut rows = Vec::new();
        for (name, term) in &losses.terms {
            let grads = term.backward()?;
            for group in ParamGroup::ALL {
                let mut sq = 0.0;
                for (_, var) in self.model.store().group_vars(group.name()) {
                    if let Some(g) = grads.get(var.as_tensor()) {
                        sq += scalar(&g.sqr()?.sum_all()?)?;
                    }
                }
                rows.push(AuditEntry {
                    term: name.to_string(),
                    group: group.name().to_string(),
                    expected_zero: must_be_isolated(name, group),
                    grad_norm: sq.sqrt(),
                });
            }
        }
        Ok(rows)
    }

    /// Runs `steps` steps, drawing batches from `next_batch(step)`.
    pub fn run<F>(&mut self, steps: u64, mut next_batch: F, mut on_step: impl FnMut(&StepReport)) -> Result<Vec<StepReport>>
    where
        F: FnMut(u64) -> Result<Batch>,
    {
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let batch = next_batch(self.step)?;
            let r = self.train_step(&batch)?;
            on_step(&r);
            reports.push(r);
        }
        Ok(reports)
    }

    /// Runs `steps` steps on random same-video pairs of the training split.
    pub fn train_on(
        &mut self,
        data: &FrameDataset,
        steps: u64,
        on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        let b = self.config().train.batch_size;
        let seed = self.seed;
        let dev = self.model.device().clone();
        self.run(
            steps,
            |step| data.sample_batch(Split::Train, b, &mut step_rng(seed, step, STREAM_DATA), &dev),
            on_step,
        )
    }
}

/// Groups a loss term must not reach.
pub fn must_be_isolated(term: &str, group: ParamGroup) -> bool {
    use ParamGroup::*;
    match term {
        // Stop-gradient on the input flow; codes, E_M and D_M only.
        "vq_motion" => !matches!(group, Motion | Codebooks),
        // Code-level only: codes and the shared window projections.
        "vq_appearance" => !matches!(group, Appearance | Codebooks),
        "eq" | "kpd" => group != Estimator,
        // The generator's adversarial term passes through the discriminator.
        "adv" => false,
        _ => group == Discriminator,
    }
}

fn codebook_var(model: &FaceAnimator, name: &str) -> Result<Var> {
    model
        .store()
        .var(&format!("codebooks.{name}.codes"))
        .ok_or_else(|| Error::Checkpoint(format!("missing {name} codebook variable")))
}
