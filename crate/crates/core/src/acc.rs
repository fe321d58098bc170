//! Appearance codebook compensation.
//!
//! Features of shape `(c, h, w)` are cut into an `h_a x w_a` grid of
//! `(h/h_a) x (w/w_a)` patches; each flattened patch is linearly projected to
//! `d_a` to form one token. The retrieval transformer queries the scale's
//! appearance codes with those tokens, and window reverse maps the result
//! back to `(c, h, w)`.
//!
//! The same window projection embeds the driving features whose
//! quantization trains the appearance codebook.

use candle_core::{Module, Tensor};

use crate::codebook::{quantize, vq_loss_appearance, AppearanceVqLoss, QuantizationResult, ScaleView};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::retrieval::{RetrievalConfig, RetrievalTransformer};

/// Windowed tokens `(B, h_a, w_a, d)` plus the shape they came from.
#[derive(Debug, Clone)]
pub struct WindowedFeature {
    pub tokens: Tensor,
    /// `(c, h, w)` of the un-windowed feature.
    pub source_shape: (usize, usize, usize),
}

/// Splits `(B, c, h, w)` into `(B, window, window, c * ph * pw)` patches.
pub fn patchify(feature: &Tensor, window: usize) -> Result<Tensor> {
    let (b, c, h, w) = feature.dims4()?;
    check_divisible(h, w, window)?;
    let (ph, pw) = (h / window, w / window);
    Ok(feature
        .reshape((b, c, window, ph, window, pw))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, window, window, c * ph * pw))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, shape: (usize, usize, usize)) -> Result<Tensor> {
    let (b, ha, wa, _) = tokens.dims4()?;
    let (c, h, w) = shape;
    let (ph, pw) = (h / ha, w / wa);
    Ok(tokens
        .reshape((b, ha, wa, c, ph, pw))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((b, c, h, w))?)
}

fn check_divisible(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!(
            "feature {h}x{w} is not divisible into a {window}x{window} window grid"
        )));
    }
    Ok(())
}

/// Learned projections between one pyramid level and the token space.
#[derive(Debug, Clone)]
pub struct WindowProjection {
    proj_in: Linear,
    proj_out: Linear,
    window: usize,
    shape: (usize, usize, usize),
}

impl WindowProjection {
    pub fn new(store: &ParamStore, shape: (usize, usize, usize), window: usize, dim: usize) -> Result<Self> {
        let (c, h, w) = shape;
        check_divisible(h, w, window)?;
        let patch = c * (h / window) * (w / window);
        Ok(Self {
            proj_in: Linear::new(&store.pp("proj_in"), patch, dim, true)?,
            proj_out: Linear::new(&store.pp("proj_out"), dim, patch, true)?,
            window,
            shape,
        })
    }

    /// Builds a projection from explicit linear maps.
    pub fn from_linear(proj_in: Linear, proj_out: Linear, shape: (usize, usize, usize), window: usize) -> Result<Self> {
        check_divisible(shape.1, shape.2, window)?;
        Ok(Self {
            proj_in,
            proj_out,
            window,
            shape,
        })
    }

    pub fn patch_dim(&self) -> usize {
        let (c, h, w) = self.shape;
        c * (h / self.window) * (w / self.window)
    }

    pub fn window_partition(&self, feature: &Tensor) -> Result<WindowedFeature> {
        let (_, c, h, w) = feature.dims4()?;
        if (c, h, w) != self.shape {
            return Err(Error::Argument(format!(
                "expected feature shape {:?}, got {:?}",
                self.shape,
                (c, h, w)
            )));
        }
        let patches = patchify(feature, self.window)?;
        Ok(WindowedFeature {
            tokens: self.proj_in.forward(&patches)?,
            source_shape: self.shape,
        })
    }

    pub fn window_reverse(&self, windowed: &WindowedFeature) -> Result<Tensor> {
        let patches = self.proj_out.forward(&windowed.tokens)?;
        unpatchify(&patches, windowed.source_shape)
    }
}

#[derive(Debug, Clone)]
pub struct AppearanceStep {
    /// `F_c^i`, same shape as the warped input.
    pub compensated: Tensor,
    /// Windowed warped feature.
    pub windowed_warped: WindowedFeature,
    /// Transformer output before window reverse.
    pub windowed_compensated: WindowedFeature,
    /// Windowed driving feature, when one was given.
    pub target: Option<WindowedFeature>,
    /// Code-level loss on `target`.
    pub loss: Option<AppearanceVqLoss>,
    pub quantization: Option<QuantizationResult>,
}

#[derive(Debug, Clone)]
pub struct AppearanceCompensation {
    windows: Vec<WindowProjection>,
    pos_embed: Tensor,
    transformer: RetrievalTransformer,
    window: usize,
    beta: f64,
}

impl AppearanceCompensation {
    /// `store` holds the window projections and position embedding;
    /// `transformer_store` holds T_A.
    pub fn new(store: &ParamStore, transformer_store: &ParamStore, cfg: &Config) -> Result<Self> {
        let m = &cfg.model;
        let windows = (1..=m.n_scales)
            .map(|i| {
                let side = cfg.level_size(i);
                WindowProjection::new(
                    &store.pp(format!("window{i}")),
                    (m.encoder_channels[i - 1], side, side),
                    m.window,
                    m.appearance_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = m.window * m.window;
        Ok(Self {
            windows,
            pos_embed: store.get(&[tokens, m.appearance_dim], "pos_embed", Init::Uniform { lo: -0.02, hi: 0.02 })?,
            transformer: RetrievalTransformer::new(
                transformer_store,
                &RetrievalConfig {
                    dim: m.appearance_dim,
                    heads: m.appearance_heads,
                    layers: m.appearance_layers,
                    code_dim: m.appearance_dim,
                    kernel: 1,
                },
            )?,
            window: m.window,
            beta: cfg.loss.beta,
        })
    }

    pub fn window_projection(&self, scale: usize) -> &WindowProjection {
        &self.windows[scale - 1]
    }

    /// Windowed and quantized driving feature plus its code-level loss.
    pub fn codebook_branch(
        &self,
        driving: &Tensor,
        view: &ScaleView,
    ) -> Result<(WindowedFeature, QuantizationResult, AppearanceVqLoss)> {
        let target = self.windows[view.scale() - 1].window_partition(driving)?;
        let q = quantize(&target.tokens, view)?;
        let loss = vq_loss_appearance(&target.tokens, &q, self.beta)?;
        Ok((target, q, loss))
    }

    /// Compensates the warped feature `F_w^i` at `view.scale()`.
    pub fn compensate_appearance(
        &self,
        warped: &Tensor,
        view: &ScaleView,
        driving: Option<&Tensor>,
    ) -> Result<AppearanceStep> {
        let proj = &self.windows[view.scale() - 1];
        let windowed = proj.window_partition(warped)?;
        let (b, ha, wa, d) = windowed.tokens.dims4()?;
        let tokens = windowed
            .tokens
            .reshape((b, ha * wa, d))?
            .broadcast_add(&self.pos_embed)?;
        let out = self
            .transformer
            .forward(&tokens, self.window, self.window, view.codes())?
            .reshape((b, ha, wa, d))?;
        let windowed_compensated = WindowedFeature {
            tokens: out,
            source_shape: windowed.source_shape,
        };
        let compensated = proj.window_reverse(&windowed_compensated)?;
        let (target, loss, quantization) = match driving {
            Some(drv) => {
                let (t, q, loss) = self.codebook_branch(drv, view)?;
                (Some(t), Some(loss), Some(q))
            }
            None => (None, None, None),
        };
        Ok(AppearanceStep {
            compensated,
            windowed_warped: windowed,
            windowed_compensated,
            target,
            loss,
            quantization,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device};

    #[test]
    fn large_level_gives_32x32x256_tokens() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let proj = WindowProjection::new(&store, (8, 64, 64), 32, 256).unwrap();
        let x = Tensor::zeros((1, 8, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let w = proj.window_partition(&x).unwrap();
        assert_eq!(w.tokens.dims(), &[1, 32, 32, 256]);
        assert_eq!(proj.patch_dim(), 8 * 2 * 2);
        assert_eq!(proj.window_reverse(&w).unwrap().dims(), &[1, 8, 64, 64]);
    }

    #[test]
    fn unit_patches_with_identity_projection_transpose_channels() {
        let eye = Tensor::eye(3, DType::F64, &Device::Cpu).unwrap();
        let proj = WindowProjection::from_linear(
            Linear::from_tensors(eye.clone(), None),
            Linear::from_tensors(eye, None),
            (3, 4, 4),
            4,
        )
        .unwrap();
        let x = Tensor::arange(0f64, 48.0, &Device::Cpu).unwrap().reshape((1, 3, 4, 4)).unwrap();
        let w = proj.window_partition(&x).unwrap();
        let expect = x.permute((0, 2, 3, 1)).unwrap();
        assert_eq!(to_vec_f64(&w.tokens).unwrap(), to_vec_f64(&expect).unwrap());
    }

    #[test]
    fn zero_tokens_reverse_to_patch_periodic_bias() {
        let store = ParamStore::new(3, DType::F64, &Device::Cpu);
        let proj = WindowProjection::new(&store, (2, 8, 8), 4, 6).unwrap();
        let zeros = WindowedFeature {
            tokens: Tensor::zeros((1, 4, 4, 6), DType::F64, &Device::Cpu).unwrap(),
            source_shape: (2, 8, 8),
        };
        let out = to_vec_f64(&proj.window_reverse(&zeros).unwrap()).unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let v = out[c * 64 + y * 8 + x];
                    let periodic = out[c * 64 + (y % 2) * 8 + (x % 2)];
                    assert_eq!(v, periodic);
                }
            }
        }
    }

    #[test]
    fn indivisible_shape_is_a_config_error() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        assert!(matches!(
            WindowProjection::new(&store, (4, 24, 24), 16, 8),
            Err(Error::Config(_))
        ));
    }

    /// `(A^T A)^{-1} A^T` for a tall `rows x cols` matrix, by Gauss-Jordan.
    fn pseudo_inverse(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut m = vec![0.0; cols * 2 * cols];
        for i in 0..cols {
            for j in 0..cols {
                m[i * 2 * cols + j] = (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum();
            }
            m[i * 2 * cols + cols + i] = 1.0;
        }
        for p in 0..cols {
            let piv = (p..cols)
                .max_by(|&x, &y| m[x * 2 * cols + p].abs().total_cmp(&m[y * 2 * cols + p].abs()))
                .unwrap();
            for k in 0..2 * cols {
                m.swap(p * 2 * cols + k, piv * 2 * cols + k);
            }
            let d = m[p * 2 * cols + p];
            for k in 0..2 * cols {
                m[p * 2 * cols + k] /= d;
            }
            for r in 0..cols {
                if r != p {
                    let f = m[r * 2 * cols + p];
                    for k in 0..2 * cols {
                        m[r * 2 * cols + k] -= f * m[p * 2 * cols + k];
                    }
                }
            }
        }
        let mut out = vec![0.0; cols * rows];
        for i in 0..cols {
            for r in 0..rows {
                out[i * rows + r] = (0..cols).map(|j| m[i * 2 * cols + cols + j] * a[r * cols + j]).sum();
            }
        }
        out
    }

    #[test]
    fn least_squares_inverse_projection_restores_content() {
        let dev = Device::Cpu;
        let store = ParamStore::new(11, DType::F64, &dev);
        let (c, side, window, d) = (3, 8, 4, 16);
        let patch = c * 4;
        let fwd = Linear::new(&store.pp("in"), patch, d, true).unwrap();
        let w = to_vec_f64(fwd.weight()).unwrap();
        let b = to_vec_f64(fwd.bias().unwrap()).unwrap();
        let pinv = pseudo_inverse(&w, d, patch);
        let back_bias: Vec<f64> = (0..patch)
            .map(|i| -(0..d).map(|r| pinv[i * d + r] * b[r]).sum::<f64>())
            .collect();
        let back = Linear::from_tensors(
            Tensor::from_vec(pinv, (patch, d), &dev).unwrap(),
            Some(Tensor::from_vec(back_bias, patch, &dev).unwrap()),
        );
        let proj = WindowProjection::from_linear(fwd, back, (c, side, side), window).unwrap();
        let x: Vec<f64> = (0..c * side * side).map(|i| ((i * 37) % 17) as f64 / 8.0 - 1.0).collect();
        let x = Tensor::from_vec(x, (1, c, side, side), &dev).unwrap();
        let y = proj.window_reverse(&proj.window_partition(&x).unwrap()).unwrap();
        for (p, q) in to_vec_f64(&x).unwrap().iter().zip(to_vec_f64(&y).unwrap()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn patchify_round_trip() {
        let x = Tensor::arange(0f64, 2.0 * 3.0 * 8.0 * 8.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 8, 8))
            .unwrap();
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.dims(), &[2, 4, 4, 12]);
        let back = unpatchify(&p, (3, 8, 8)).unwrap();
        assert_eq!(to_vec_f64(&back).unwrap(), to_vec_f64(&x).unwrap());
    }
}
