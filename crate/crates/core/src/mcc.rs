//! Motion codebook compensation.
//!
//! At scale `i` the incoming flow `M^{i-1}` is encoded, combined with the
//! current appearance context and the driving keypoint heatmaps into a query,
//! and the retrieval transformer looks up the scale's motion codes. The
//! result is decoded into a residual `M_r^i` and `M^i = M^{i-1} + M_r^i`.
//!
//! In parallel, `E_M(sg[M^{i-1}])` is quantized and decoded by `D_M` to
//! train the motion codebook; that branch never feeds the compensated flow.
//!
//! Flow encoders and decoders work in pixel units of the flow grid so that
//! the latent scale does not depend on the grid resolution.

use candle_core::{Module, Tensor};

use crate::codebook::{quantize, vq_loss_motion, MotionVqLoss, QuantizationResult, ScaleView, VqWeights};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::flowcore::{resize, FlowField};
use crate::nn::{Conv2d, Init, ParamStore, Upsample2x};
use crate::retrieval::{RetrievalConfig, RetrievalTransformer};

/// `E_M` output, channels-last `(B, h_m, w_m, d_m)`.
#[derive(Debug, Clone)]
pub struct MotionLatent(pub Tensor);

impl MotionLatent {
    fn channels_first(&self) -> Result<Tensor> {
        Ok(self.0.permute((0, 3, 1, 2))?)
    }
}

/// Flattened query tokens `(B, h_m * w_m, d_q)` with position embedding.
#[derive(Debug, Clone)]
pub struct MotionQuery {
    pub tokens: Tensor,
    pub side: usize,
}

/// Transformer output, channels-last `(B, h_m, w_m, d_q)`.
#[derive(Debug, Clone)]
pub struct MotionResidualLatent(pub Tensor);

fn log2(n: usize) -> usize {
    n.trailing_zeros() as usize
}

/// CNN flow encoder `E_M`: `(B, h, w, 2)` grid to `(B, h/s, w/s, d_m)`.
#[derive(Debug, Clone)]
pub struct FlowEncoder {
    conv_in: Conv2d,
    downs: Vec<Conv2d>,
    conv_out: Conv2d,
}

impl FlowEncoder {
    pub fn new(store: &ParamStore, width: usize, dim: usize, stride: usize) -> Result<Self> {
        let downs = (0..log2(stride))
            .map(|i| Conv2d::new(&store.pp(format!("down{i}")), width, width, 3, 2, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            conv_in: Conv2d::new(&store.pp("conv_in"), 2, width, 3, 1, true)?,
            downs,
            conv_out: Conv2d::new(&store.pp("conv_out"), width, dim, 3, 1, true)?,
        })
    }

    pub fn forward(&self, flow: &FlowField) -> Result<MotionLatent> {
        let (h, _) = flow.resolution();
        let disp = (flow.displacement()?.permute((0, 3, 1, 2))? * (h as f64 / 2.0))?;
        let mut x = self.conv_in.forward(&disp)?.silu()?;
        for d in &self.downs {
            x = d.forward(&x)?.silu()?;
        }
        let z = self.conv_out.forward(&x)?;
        Ok(MotionLatent(z.permute((0, 2, 3, 1))?))
    }
}

/// Transposed-convolution upsampler emitting a 2-channel pixel displacement.
#[derive(Debug, Clone)]
pub struct DisplacementDecoder {
    conv_in: Conv2d,
    ups: Vec<Upsample2x>,
    conv_out: Conv2d,
}

impl DisplacementDecoder {
    pub fn new(store: &ParamStore, in_c: usize, width: usize, factor: usize, zero_out: bool) -> Result<Self> {
        let ups = (0..log2(factor))
            .map(|i| Upsample2x::new(&store.pp(format!("up{i}")), width, width))
            .collect::<Result<Vec<_>>>()?;
        let conv_out = if zero_out {
            Conv2d::zeros(&store.pp("conv_out"), width, 2, 3)?
        } else {
            Conv2d::new(&store.pp("conv_out"), width, 2, 3, 1, true)?
        };
        Ok(Self {
            conv_in: Conv2d::new(&store.pp("conv_in"), in_c, width, 3, 1, true)?,
            ups,
            conv_out,
        })
    }

    /// Channels-first `(B, C, h, w)` in; `(B, H, W, 2)` normalized displacement out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = self.conv_in.forward(x)?.silu()?;
        for u in &self.ups {
            x = u.forward(&x)?.silu()?;
        }
        let px = self.conv_out.forward(&x)?;
        let side = px.dims4()?.2;
        Ok((px * (2.0 / side as f64))?.permute((0, 2, 3, 1))?)
    }
}

/// Everything motion compensation produces at one scale.
#[derive(Debug, Clone)]
pub struct MotionStep {
    /// Compensated flow `M^i`.
    pub flow: FlowField,
    /// Residual `M_r^i`, a displacement in normalized units.
    pub residual: Tensor,
    /// `D_M(Q(E_M(sg[M^{i-1}])))`.
    pub reconstruction: FlowField,
    /// `E_M(sg[M^{i-1}])`, channels-last.
    pub encoded: Tensor,
    pub quantization: QuantizationResult,
    pub loss: MotionVqLoss,
}

#[derive(Debug, Clone)]
pub struct MotionCompensation {
    encoder: FlowEncoder,
    decoder: DisplacementDecoder,
    residual_decoder: DisplacementDecoder,
    query_flow: Conv2d,
    query_appearance: Conv2d,
    query_keypoints: Conv2d,
    cw_projections: Vec<Conv2d>,
    pos_embed: Tensor,
    transformer: RetrievalTransformer,
    latent_side: usize,
    flow_side: usize,
    weights: VqWeights,
    straight_through: bool,
}

impl MotionCompensation {
    /// `store` holds E_M/D_M/D_MR and the query block; `transformer_store` holds T_M.
    pub fn new(store: &ParamStore, transformer_store: &ParamStore, cfg: &Config) -> Result<Self> {
        let m = &cfg.model;
        let side = cfg.motion_latent_size();
        let stride = m.motion_latent_stride;
        let dq = m.query_dim;
        let (q_flow, q_app) = (dq / 2, dq / 4);
        let q_kp = dq - q_flow - q_app;
        let width = m.motion_encoder_channels;
        // F_cw at scale 1 is the warped scale-1 source feature; at scale i > 1
        // it is the compensated feature of scale i - 1.
        let cw_projections = (1..=m.n_scales)
            .map(|i| {
                let c = m.encoder_channels[i.saturating_sub(2)];
                Conv2d::new(&store.pp(format!("cw_proj{i}")), c, q_app, 1, 1, true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder: FlowEncoder::new(&store.pp("flow_encoder"), width, m.motion_dim, stride)?,
            decoder: DisplacementDecoder::new(&store.pp("flow_decoder"), m.motion_dim, width, stride, false)?,
            residual_decoder: DisplacementDecoder::new(&store.pp("residual_decoder"), dq, width, stride, true)?,
            query_flow: Conv2d::new(&store.pp("query_flow"), m.motion_dim, q_flow, 3, 1, true)?,
            query_appearance: Conv2d::new(&store.pp("query_appearance"), q_app, q_app, 3, 1, true)?,
            query_keypoints: Conv2d::new(&store.pp("query_keypoints"), m.n_keypoints, q_kp, 3, 1, true)?,
            cw_projections,
            pos_embed: store.get(&[side * side, dq], "pos_embed", Init::Uniform { lo: -0.02, hi: 0.02 })?,
            transformer: RetrievalTransformer::new(
                transformer_store,
                &RetrievalConfig {
                    dim: dq,
                    heads: m.motion_heads,
                    layers: m.motion_layers,
                    code_dim: m.motion_dim,
                    kernel: 3,
                },
            )?,
            latent_side: side,
            flow_side: m.flow_size,
            weights: VqWeights {
                lambda_recon_m: cfg.loss.lambda_recon_m,
                beta: cfg.loss.beta,
            },
            straight_through: m.motion_straight_through,
        })
    }

    pub fn latent_side(&self) -> usize {
        self.latent_side
    }

    pub fn encode_flow(&self, flow: &FlowField) -> Result<MotionLatent> {
        if flow.resolution() != (self.flow_side, self.flow_side) {
            return Err(Error::Argument(format!(
                "flow must be {s}x{s}, got {:?}",
                flow.resolution(),
                s = self.flow_side
            )));
        }
        self.encoder.forward(flow)
    }

    pub fn decode_flow(&self, latent: &MotionLatent) -> Result<FlowField> {
        let disp = self.decoder.forward(&latent.channels_first()?)?;
        let (b, h, w, _) = disp.dims4()?;
        FlowField::identity(b, h, w, disp.dtype(), disp.device())?.add_displacement(&disp)
    }

    /// Fuses encoded flow, appearance context (`F_cw`, any resolution) and
    /// driving keypoint heatmaps into query tokens.
    pub fn build_query(
        &self,
        latent: &MotionLatent,
        appearance: &Tensor,
        keypoints: &Tensor,
        scale: usize,
    ) -> Result<MotionQuery> {
        let s = self.latent_side;
        let flow_part = self.query_flow.forward(&latent.channels_first()?)?.silu()?;
        let app = self.cw_projections[scale - 1].forward(&resize(appearance, s, s)?)?;
        let app_part = self.query_appearance.forward(&app)?.silu()?;
        let kp_part = self
            .query_keypoints
            .forward(&resize(keypoints, s, s)?)?
            .silu()?;
        let fused = Tensor::cat(&[&flow_part, &app_part, &kp_part], 1)?;
        let (b, d, _, _) = fused.dims4()?;
        let tokens = fused
            .reshape((b, d, s * s))?
            .transpose(1, 2)?
            .contiguous()?
            .broadcast_add(&self.pos_embed)?;
        Ok(MotionQuery { tokens, side: s })
    }

    pub fn retrieve_motion_residual(&self, query: &MotionQuery, view: &ScaleView) -> Result<MotionResidualLatent> {
        let s = query.side;
        let out = self.transformer.forward(&query.tokens, s, s, view.codes())?;
        let (b, _, d) = out.dims3()?;
        Ok(MotionResidualLatent(out.reshape((b, s, s, d))?))
    }

    /// Decodes a residual latent into a normalized displacement `(B, h, w, 2)`.
    pub fn decode_residual(&self, latent: &MotionResidualLatent) -> Result<Tensor> {
        self.residual_decoder.forward(&latent.0.permute((0, 3, 1, 2))?)
    }

    /// Codebook-learning branch on the detached input flow.
    /// Returns the reconstruction, the encoder output, its quantization and the loss.
    pub fn codebook_branch(
        &self,
        flow: &FlowField,
        view: &ScaleView,
    ) -> Result<(FlowField, Tensor, QuantizationResult, MotionVqLoss)> {
        let target = flow.detach();
        let encoded = self.encode_flow(&target)?;
        let q = quantize(&encoded.0, view)?;
        // By default D_M decodes the detached codes: the reconstruction term
        // trains D_M only and E_M learns here through the commitment term.
        let decoder_input = if self.straight_through {
            q.quantized.clone()
        } else {
            q.selected.detach()
        };
        let reconstruction = self.decode_flow(&MotionLatent(decoder_input))?;
        let loss = vq_loss_motion(reconstruction.grid(), target.grid(), &encoded.0, &q, self.weights)?;
        Ok((reconstruction, encoded.0, q, loss))
    }

    /// One compensation step at `scale`: returns `M^i` from `M^{i-1}`.
    pub fn compensate_motion(
        &self,
        prev: &FlowField,
        appearance: &Tensor,
        keypoints: &Tensor,
        view: &ScaleView,
    ) -> Result<MotionStep> {
        let latent = self.encode_flow(prev)?;
        let query = self.build_query(&latent, appearance, keypoints, view.scale())?;
        let residual_latent = self.retrieve_motion_residual(&query, view)?;
        let residual = self.decode_residual(&residual_latent)?;
        let flow = prev.add_displacement(&residual)?;
        let (reconstruction, encoded, quantization, loss) = self.codebook_branch(prev, view)?;
        Ok(MotionStep {
            flow,
            residual,
            reconstruction,
            encoded,
            quantization,
            loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{Codebook, CodebookKind};
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device};

    fn tiny() -> Config {
        let mut cfg = Config::desk();
        cfg.model.flow_size = 16;
        cfg.model.motion_latent_stride = 2;
        cfg.model.motion_encoder_channels = 8;
        cfg.model.query_dim = 16;
        cfg.model.motion_dim = 4;
        cfg.model.motion_codes = 8;
        cfg.model.n_keypoints = 3;
        cfg.model.encoder_channels = vec![6, 4];
        cfg
    }

    #[test]
    fn shapes_and_zero_residual_neutrality() {
        let cfg = tiny();
        let store = ParamStore::new(2, DType::F64, &Device::Cpu);
        let mcc = MotionCompensation::new(&store.pp("motion"), &store.pp("motion_transformer"), &cfg).unwrap();
        let cb = Codebook::new(&store.pp("codebooks.motion"), CodebookKind::Motion, 8, 4, 2).unwrap();
        let flow = FlowField::identity(2, 16, 16, DType::F64, &Device::Cpu).unwrap();
        let latent = mcc.encode_flow(&flow).unwrap();
        assert_eq!(latent.0.dims(), &[2, 8, 8, 4]);
        assert_eq!(mcc.decode_flow(&latent).unwrap().grid().dims(), &[2, 16, 16, 2]);

        let app = Tensor::ones((2, 6, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let kp = Tensor::ones((2, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let step = mcc.compensate_motion(&flow, &app, &kp, &cb.allocate(1).unwrap()).unwrap();
        // The residual head is zero-initialized.
        assert_eq!(to_vec_f64(step.flow.grid()).unwrap(), to_vec_f64(flow.grid()).unwrap());
        assert!(step.quantization.indices.iter().all(|&i| i < 4));
    }

    #[test]
    fn wrong_flow_resolution_is_rejected() {
        let cfg = tiny();
        let store = ParamStore::new(2, DType::F32, &Device::Cpu);
        let mcc = MotionCompensation::new(&store.pp("motion"), &store.pp("mt"), &cfg).unwrap();
        let flow = FlowField::identity(1, 8, 8, DType::F32, &Device::Cpu).unwrap();
        assert!(mcc.encode_flow(&flow).is_err());
    }

    #[test]
    fn transformer_size_is_independent_of_scale_count() {
        let mut a = tiny();
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        MotionCompensation::new(&store.pp("m"), &store.pp("t"), &a).unwrap();
        let n2 = store.num_params(Some("t"));
        a.model.n_scales = 4;
        a.model.encoder_channels = vec![6, 6, 6, 4];
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        MotionCompensation::new(&store.pp("m"), &store.pp("t"), &a).unwrap();
        assert_eq!(store.num_params(Some("t")), n2);
    }
}
