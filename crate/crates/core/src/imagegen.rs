//! Image encoder, multi-scale fusion decoder and patch discriminator.

use candle_core::{Module, Tensor};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, GroupNorm, ParamStore, ResBlock, Upsample2x};

/// Per-scale feature maps, coarse (scale 1) to fine (scale N).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Self {
        Self { levels }
    }

    pub fn n_scales(&self) -> usize {
        self.levels.len()
    }

    /// Level of 1-based `scale`.
    pub fn level(&self, scale: usize) -> &Tensor {
        &self.levels[scale - 1]
    }

    pub fn detach(&self) -> Self {
        Self::new(self.levels.iter().map(|t| t.detach()).collect())
    }
}

fn check_image(image: &Tensor, size: usize) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 || h != size || w != size {
        return Err(Error::Config(format!(
            "expected (B, 3, {size}, {size}) image, got {:?}",
            image.dims()
        )));
    }
    Ok(())
}

/// `E_I`: a convolutional stem at full resolution followed by stride-2 stages;
/// every stage output is one pyramid level.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stem: Conv2d,
    /// Stage for each scale, fine to coarse: `stages[0]` produces scale N.
    stages: Vec<(Option<Conv2d>, ResBlock)>,
    image_size: usize,
}

impl ImageEncoder {
    pub fn new(store: &ParamStore, cfg: &Config) -> Result<Self> {
        let ch = &cfg.model.encoder_channels;
        let n = ch.len();
        let stem = Conv2d::new(&store.pp("stem"), 3, ch[n - 1], 3, 1, true)?;
        let mut stages = Vec::with_capacity(n);
        for (k, scale) in (1..=n).rev().enumerate() {
            let c = ch[scale - 1];
            let down = if k == 0 {
                None
            } else {
                Some(Conv2d::new(&store.pp(format!("down{scale}")), ch[scale], c, 3, 2, true)?)
            };
            stages.push((down, ResBlock::new(&store.pp(format!("res{scale}")), c)?));
        }
        Ok(Self {
            stem,
            stages,
            image_size: cfg.model.image_size,
        })
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<FeaturePyramid> {
        check_image(image, self.image_size)?;
        let mut x = self.stem.forward(image)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        for (down, res) in &self.stages {
            if let Some(d) = down {
                x = d.forward(&x.silu()?)?;
            }
            x = res.forward(&x)?;
            levels.push(x.clone());
        }
        levels.reverse();
        Ok(FeaturePyramid::new(levels))
    }
}

/// Spatial feature transform: predicts per-pixel scale and shift from a
/// condition map. All convolutions are bias-free, so a zero condition gives
/// zero scale and shift.
#[derive(Debug, Clone)]
pub struct Sft {
    hidden: Conv2d,
    scale: Conv2d,
    shift: Conv2d,
}

impl Sft {
    pub fn new(store: &ParamStore, cond_c: usize, c: usize) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(&store.pp("hidden"), cond_c, c, 3, 1, false)?,
            scale: Conv2d::new(&store.pp("scale"), c, c, 3, 1, false)?,
            shift: Conv2d::new(&store.pp("shift"), c, c, 3, 1, false)?,
        })
    }

    /// Returns `(scale, shift)`.
    pub fn predict(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = nn::leaky_relu(&self.hidden.forward(cond)?, 0.1)?;
        Ok((self.scale.forward(&h)?, self.shift.forward(&h)?))
    }

    /// `x * (1 + scale) + shift`.
    pub fn modulate(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        Ok(((x * (scale + 1.0)?)? + shift)?)
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (scale, shift) = self.predict(cond)?;
        Self::modulate(x, &scale, &shift)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Upsample2x,
    sft: Sft,
    res: Vec<ResBlock>,
}

/// `D_I`: starts from `F_c^1`, upsamples through the finer scales and fuses
/// each `F_c^i` by SFT modulation followed by addition.
#[derive(Debug, Clone)]
pub struct ImageDecoder {
    conv_in: Conv2d,
    res_in: Vec<ResBlock>,
    stages: Vec<DecoderStage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl ImageDecoder {
    pub fn new(store: &ParamStore, cfg: &Config) -> Result<Self> {
        let ch = &cfg.model.encoder_channels;
        let blocks = cfg.model.decoder_res_blocks;
        let res = |s: &ParamStore, c: usize| -> Result<Vec<ResBlock>> {
            (0..blocks).map(|k| ResBlock::new(&s.pp(format!("res{k}")), c)).collect()
        };
        let mut stages = Vec::new();
        for i in 2..=ch.len() {
            let s = store.pp(format!("stage{i}"));
            stages.push(DecoderStage {
                up: Upsample2x::new(&s.pp("up"), ch[i - 2], ch[i - 1])?,
                sft: Sft::new(&s.pp("sft"), ch[i - 1], ch[i - 1])?,
                res: res(&s, ch[i - 1])?,
            });
        }
        let c_last = *ch.last().expect("at least one scale");
        Ok(Self {
            conv_in: Conv2d::new(&store.pp("conv_in"), ch[0], ch[0], 3, 1, true)?,
            res_in: res(&store.pp("in"), ch[0])?,
            stages,
            norm_out: GroupNorm::new(&store.pp("norm_out"), c_last, 8)?,
            conv_out: Conv2d::new(&store.pp("conv_out"), c_last, 3, 3, 1, true)?,
        })
    }

    fn run(&self, first: &Tensor, rest: Option<&[Tensor]>) -> Result<Tensor> {
        let mut x = self.conv_in.forward(first)?;
        for r in &self.res_in {
            x = r.forward(&x)?;
        }
        for (k, stage) in self.stages.iter().enumerate() {
            x = stage.up.forward(&x)?;
            if let Some(levels) = rest {
                let f = &levels[k];
                x = (stage.sft.forward(&x, f)? + f)?;
            }
            for r in &stage.res {
                x = r.forward(&x)?;
            }
        }
        let x = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        Ok(nn::sigmoid(&x)?)
    }

    /// `I_g` from the compensated pyramid.
    pub fn decode_image(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        if pyramid.n_scales() != self.stages.len() + 1 {
            return Err(Error::Argument(format!(
                "pyramid has {} levels, decoder expects {}",
                pyramid.n_scales(),
                self.stages.len() + 1
            )));
        }
        self.run(&pyramid.levels[0], Some(&pyramid.levels[1..]))
    }

    /// `I_g^1`: same weights, finer levels absent and SFT bypassed.
    pub fn decode_image_lowres_only(&self, first: &Tensor) -> Result<Tensor> {
        self.run(first, None)
    }
}

/// Logits and intermediate activations of one discriminator scale.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

/// Multi-scale patch discriminator. Scale `k` sees the image average-pooled
/// `k` times; with depth `d` the first scale emits `(B, 1, h/2^d, w/2^d)`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    scales: Vec<(Vec<Conv2d>, Conv2d)>,
}

impl Discriminator {
    pub fn new(store: &ParamStore, cfg: &Config) -> Result<Self> {
        let m = &cfg.model;
        let scales = (0..m.discriminator_scales)
            .map(|s| {
                let st = store.pp(format!("scale{s}"));
                let mut c_in = 3;
                let mut convs = Vec::with_capacity(m.discriminator_depth);
                for d in 0..m.discriminator_depth {
                    let c_out = m.discriminator_channels << d.min(3);
                    convs.push(Conv2d::new(&st.pp(format!("conv{d}")), c_in, c_out, 4, 2, true)?.with_padding(1, nn::Padding::Zeros));
                    c_in = c_out;
                }
                let head = Conv2d::new(&st.pp("head"), c_in, 1, 3, 1, true)?;
                Ok((convs, head))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scales })
    }

    pub fn discriminate(&self, image: &Tensor) -> Result<Vec<DiscriminatorOutput>> {
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(self.scales.len());
        for (k, (convs, head)) in self.scales.iter().enumerate() {
            if k > 0 {
                x = nn::avg_pool2(&x)?;
            }
            let mut h = x.clone();
            let mut features = Vec::with_capacity(convs.len());
            for c in convs {
                h = nn::leaky_relu(&c.forward(&h)?, 0.2)?;
                features.push(h.clone());
            }
            outs.push(DiscriminatorOutput {
                logits: head.forward(&h)?,
                features,
            });
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device};

    fn cfg4() -> Config {
        let mut cfg = Config::desk();
        cfg.model.n_scales = 4;
        cfg.model.encoder_channels = vec![16, 8, 8, 8];
        cfg.model.window = 8;
        cfg
    }

    fn image(seed: usize) -> Tensor {
        let v: Vec<f32> = (0..3 * 64 * 64).map(|i| (((i + seed) * 31) % 101) as f32 / 100.0).collect();
        Tensor::from_vec(v, (1, 3, 64, 64), &Device::Cpu).unwrap()
    }

    #[test]
    fn four_scale_pyramid_sizes() {
        let cfg = cfg4();
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let enc = ImageEncoder::new(&store, &cfg).unwrap();
        let p = enc.encode_image(&image(0)).unwrap();
        let sides: Vec<usize> = p.levels.iter().map(|l| l.dims()[2]).collect();
        assert_eq!(sides, vec![8, 16, 32, 64]);
        let again = enc.encode_image(&image(0)).unwrap();
        for (a, b) in p.levels.iter().zip(&again.levels) {
            assert_eq!(to_vec_f64(a).unwrap(), to_vec_f64(b).unwrap());
        }
    }

    #[test]
    fn wrong_input_size_is_a_config_error() {
        let cfg = cfg4();
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let enc = ImageEncoder::new(&store, &cfg).unwrap();
        let small = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode_image(&small), Err(Error::Config(_))));
    }

    #[test]
    fn zero_finer_levels_match_lowres_bypass() {
        let cfg = cfg4();
        let store = ParamStore::new(1, DType::F32, &Device::Cpu);
        let enc = ImageEncoder::new(&store.pp("enc"), &cfg).unwrap();
        let dec = ImageDecoder::new(&store.pp("dec"), &cfg).unwrap();
        let p = enc.encode_image(&image(3)).unwrap();
        let full = dec.decode_image(&p).unwrap();
        assert_eq!(full.dims(), &[1, 3, 64, 64]);
        let mut padded = vec![p.levels[0].clone()];
        padded.extend(p.levels[1..].iter().map(|l| l.zeros_like().unwrap()));
        let a = to_vec_f64(&dec.decode_image(&FeaturePyramid::new(padded)).unwrap()).unwrap();
        let b = to_vec_f64(&dec.decode_image_lowres_only(&p.levels[0]).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sft_with_zero_scale_and_shift_is_identity() {
        let x = image(5);
        let z = x.zeros_like().unwrap();
        let y = Sft::modulate(&x, &z, &z).unwrap();
        assert_eq!(to_vec_f64(&y).unwrap(), to_vec_f64(&x).unwrap());
    }

    #[test]
    fn discriminator_patch_shapes() {
        let cfg = Config::desk();
        let store = ParamStore::new(2, DType::F32, &Device::Cpu);
        let d = Discriminator::new(&store, &cfg).unwrap();
        let outs = d.discriminate(&image(1)).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[0].logits.dims(), &[1, 1, 4, 4]);
        assert_eq!(outs[1].logits.dims(), &[1, 1, 2, 2]);
        assert_eq!(outs[0].features.len(), 4);
    }
}
