//! Code retrieval transformer shared by motion and appearance compensation.
//!
//! Each layer runs, with pre-normalization and a residual connection around
//! every sub-block:
//! 1. multi-head self-attention over the flattened spatial sites, with
//!    Q/K/V produced by a convolution over the token grid;
//! 2. cross-attention whose queries are the self-attention output and whose
//!    keys/values are linear projections of the allocated codes;
//! 3. a convolutional feed-forward block.

use candle_core::{Module, Tensor};

use crate::error::Result;
use crate::nn::{self, Conv2d, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct RetrievalConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub code_dim: usize,
    /// Kernel of the Q/K/V and feed-forward convolutions (1 = linear).
    pub kernel: usize,
}

/// Scaled dot-product attention. `q` is `(B, Lq, D)`, `k`/`v` are
/// `(B, Lk, D)` or `(1, Lk, D)`. Returns the output and the `(B, H, Lq, Lk)`
/// attention weights.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (b, lq, d) = q.dims3()?;
    let (kb, lk, _) = k.dims3()?;
    let dh = d / heads;
    let split = |t: &Tensor, bb: usize, l: usize| -> Result<Tensor> {
        Ok(t.reshape((bb, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = split(q, b, lq)?;
    let kh = split(k, kb, lk)?;
    let vh = split(v, kb, lk)?;
    let scores = (qh.broadcast_matmul(&kh.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    let weights = nn::softmax(&scores, 3)?;
    let out = weights
        .broadcast_matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, lq, d))?;
    Ok((out, weights))
}

fn tokens_to_grid(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, d) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?)
}

fn grid_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = x.dims4()?;
    Ok(x.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

#[derive(Debug, Clone)]
pub struct RetrievalLayer {
    heads: usize,
    norm_sa: LayerNorm,
    qkv: Conv2d,
    sa_out: Linear,
    norm_ca: LayerNorm,
    ca_q: Linear,
    ca_k: Linear,
    ca_v: Linear,
    ca_out: Linear,
    norm_ff: LayerNorm,
    ff1: Conv2d,
    ff2: Conv2d,
}

impl RetrievalLayer {
    pub fn new(store: &ParamStore, cfg: &RetrievalConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            heads: cfg.heads,
            norm_sa: LayerNorm::new(&store.pp("norm_sa"), d)?,
            qkv: Conv2d::new(&store.pp("qkv"), d, 3 * d, cfg.kernel, 1, true)?,
            sa_out: Linear::new(&store.pp("sa_out"), d, d, true)?,
            norm_ca: LayerNorm::new(&store.pp("norm_ca"), d)?,
            ca_q: Linear::new(&store.pp("ca_q"), d, d, true)?,
            ca_k: Linear::new(&store.pp("ca_k"), cfg.code_dim, d, true)?,
            ca_v: Linear::new(&store.pp("ca_v"), cfg.code_dim, d, true)?,
            ca_out: Linear::new(&store.pp("ca_out"), d, d, true)?,
            norm_ff: LayerNorm::new(&store.pp("norm_ff"), d)?,
            ff1: Conv2d::new(&store.pp("ff1"), d, 2 * d, cfg.kernel, 1, true)?,
            ff2: Conv2d::new(&store.pp("ff2"), 2 * d, d, cfg.kernel, 1, true)?,
        })
    }

    pub fn self_attend(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let d = x.dims3()?.2;
        let normed = self.norm_sa.forward(x)?;
        let qkv = grid_to_tokens(&self.qkv.forward(&tokens_to_grid(&normed, h, w)?)?)?;
        let q = qkv.narrow(2, 0, d)?;
        let k = qkv.narrow(2, d, d)?;
        let v = qkv.narrow(2, 2 * d, d)?;
        let (out, _) = multi_head_attention(&q, &k, &v, self.heads)?;
        Ok(self.sa_out.forward(&out)?)
    }

    /// Cross-attention of (already normalized) tokens over `codes`
    /// (`n x code_dim`). Returns the sub-block output and attention weights.
    pub fn cross_attend(&self, x: &Tensor, codes: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.ca_q.forward(x)?;
        let k = self.ca_k.forward(codes)?.unsqueeze(0)?;
        let v = self.ca_v.forward(codes)?.unsqueeze(0)?;
        let (out, weights) = multi_head_attention(&q, &k, &v, self.heads)?;
        Ok((self.ca_out.forward(&out)?, weights))
    }

    /// Value projection of each code pushed through the output projection:
    /// what cross-attention returns when it attends to that code alone.
    pub fn code_values(&self, codes: &Tensor) -> Result<Tensor> {
        Ok(self.ca_out.forward(&self.ca_v.forward(codes)?)?)
    }

    pub fn feed_forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let normed = tokens_to_grid(&self.norm_ff.forward(x)?, h, w)?;
        let hidden = self.ff1.forward(&normed)?.gelu_erf()?;
        grid_to_tokens(&self.ff2.forward(&hidden)?)
    }

    /// `x` is `(B, h*w, dim)`.
    pub fn forward(&self, x: &Tensor, h: usize, w: usize, codes: &Tensor) -> Result<Tensor> {
        let x = (x + self.self_attend(x, h, w)?)?;
        let (ca, _) = self.cross_attend(&self.norm_ca.forward(&x)?, codes)?;
        let x = (x + ca)?;
        Ok((&x + self.feed_forward(&x, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalTransformer {
    layers: Vec<RetrievalLayer>,
    norm_out: LayerNorm,
}

impl RetrievalTransformer {
    pub fn new(store: &ParamStore, cfg: &RetrievalConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| RetrievalLayer::new(&store.pp(format!("layer{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            norm_out: LayerNorm::new(&store.pp("norm_out"), cfg.dim)?,
        })
    }

    pub fn layers(&self) -> &[RetrievalLayer] {
        &self.layers
    }

    /// Runs all layers over `(B, h*w, dim)` tokens against `codes`.
    pub fn forward(&self, tokens: &Tensor, h: usize, w: usize, codes: &Tensor) -> Result<Tensor> {
        let mut x = tokens.clone();
        for layer in &self.layers {
            x = layer.forward(&x, h, w, codes)?;
        }
        Ok(self.norm_out.forward(&x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device};

    fn setup() -> (RetrievalTransformer, Tensor, Tensor) {
        let cfg = RetrievalConfig {
            dim: 8,
            heads: 2,
            layers: 2,
            code_dim: 4,
            kernel: 3,
        };
        let store = ParamStore::new(5, DType::F64, &Device::Cpu);
        let t = RetrievalTransformer::new(&store, &cfg).unwrap();
        let x: Vec<f64> = (0..2 * 16 * 8).map(|i| ((i * 29) % 31) as f64 / 15.0 - 1.0).collect();
        let x = Tensor::from_vec(x, (2, 16, 8), &Device::Cpu).unwrap();
        let c: Vec<f64> = (0..5 * 4).map(|i| ((i * 7) % 13) as f64 / 6.0 - 1.0).collect();
        let c = Tensor::from_vec(c, (5, 4), &Device::Cpu).unwrap();
        (t, x, c)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (t, x, c) = setup();
        let (_, w) = t.layers()[0].cross_attend(&x, &c).unwrap();
        assert_eq!(w.dims(), &[2, 2, 16, 5]);
        for s in to_vec_f64(&w.sum(3).unwrap()).unwrap() {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn single_code_cross_attention_returns_its_value_everywhere() {
        let (t, x, c) = setup();
        let one = c.narrow(0, 0, 1).unwrap();
        let layer = &t.layers()[0];
        let (out, _) = layer.cross_attend(&x, &one).unwrap();
        let value = to_vec_f64(&layer.code_values(&one).unwrap()).unwrap();
        for site in to_vec_f64(&out).unwrap().chunks(8) {
            for (a, b) in site.iter().zip(&value) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_is_invariant_to_code_order() {
        let (t, x, c) = setup();
        let perm = Tensor::new(&[3u32, 0, 4, 2, 1], &Device::Cpu).unwrap();
        let shuffled = c.index_select(&perm, 0).unwrap();
        let a = to_vec_f64(&t.forward(&x, 4, 4, &c).unwrap()).unwrap();
        let b = to_vec_f64(&t.forward(&x, 4, 4, &shuffled).unwrap()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}
