//! Multi-scale codebooks with prefix code allocation.
//!
//! A codebook of `n` codes shared by `N` scales is split into `N` equal
//! groups; scale `i` uses the first `i` groups, i.e. the first `i * n / N`
//! codes. Smaller scales therefore see a prefix of what larger scales see.

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookKind {
    Motion,
    Appearance,
}

impl CodebookKind {
    pub fn tag(self) -> u32 {
        match self {
            CodebookKind::Motion => 0,
            CodebookKind::Appearance => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(CodebookKind::Motion),
            1 => Some(CodebookKind::Appearance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Codebook {
    codes: Tensor,
    n_scales: usize,
    kind: CodebookKind,
}

impl Codebook {
    /// New trainable codebook with codes drawn from U(-1/n, 1/n).
    pub fn new(
        store: &ParamStore,
        kind: CodebookKind,
        n_codes: usize,
        dim: usize,
        n_scales: usize,
    ) -> Result<Self> {
        check_divisible(n_codes, n_scales)?;
        let bound = 1.0 / n_codes as f64;
        let codes = store.get(
            &[n_codes, dim],
            "codes",
            Init::Uniform {
                lo: -bound,
                hi: bound,
            },
        )?;
        Ok(Self {
            codes,
            n_scales,
            kind,
        })
    }

    /// Wraps an existing `(n_codes, dim)` matrix.
    pub fn from_codes(codes: Tensor, n_scales: usize, kind: CodebookKind) -> Result<Self> {
        let (n, _) = codes.dims2()?;
        check_divisible(n, n_scales)?;
        Ok(Self {
            codes,
            n_scales,
            kind,
        })
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn n_codes(&self) -> usize {
        self.codes.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.dims()[1]
    }

    pub fn n_scales(&self) -> usize {
        self.n_scales
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    /// Codes allocated to `scale` (1-based): the first `scale * n / N`.
    pub fn allocate(&self, scale: usize) -> Result<ScaleView> {
        if scale == 0 || scale > self.n_scales {
            return Err(Error::Argument(format!(
                "scale {scale} outside 1..={}",
                self.n_scales
            )));
        }
        let n_allocated = scale * self.n_codes() / self.n_scales;
        Ok(ScaleView {
            codes: self.codes.narrow(0, 0, n_allocated)?,
            scale,
            n_allocated,
            kind: self.kind,
        })
    }

    /// Overwrites rows of the code matrix; `rows` are `(index, values)`.
    pub(crate) fn set_rows(&self, var: &Var, rows: &[(usize, Vec<f64>)]) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let mut host = nn::to_vec_f64(&self.codes)?;
        let dim = self.dim();
        for (i, v) in rows {
            host[i * dim..(i + 1) * dim].copy_from_slice(v);
        }
        let t = Tensor::from_vec(host, self.codes.shape(), self.codes.device())?
            .to_dtype(self.codes.dtype())?;
        var.set(&t)?;
        Ok(())
    }
}

fn check_divisible(n_codes: usize, n_scales: usize) -> Result<()> {
    if n_scales == 0 || n_codes % n_scales != 0 || n_codes == 0 {
        return Err(Error::Config(format!(
            "{n_codes} codes cannot be split into {n_scales} equal groups"
        )));
    }
    Ok(())
}

/// Prefix of a codebook allocated to one scale.
#[derive(Debug, Clone)]
pub struct ScaleView {
    codes: Tensor,
    scale: usize,
    n_allocated: usize,
    kind: CodebookKind,
}

impl ScaleView {
    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn n_allocated(&self) -> usize {
        self.n_allocated
    }

    pub fn dim(&self) -> usize {
        self.codes.dims()[1]
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    /// View over an arbitrary code matrix (tests, analysis).
    pub fn from_codes(codes: Tensor, kind: CodebookKind) -> Result<Self> {
        let (n, _) = codes.dims2()?;
        Ok(Self {
            codes,
            scale: 1,
            n_allocated: n,
            kind,
        })
    }
}

#[derive(Debug, Clone)]
pub struct QuantizationResult {
    /// Straight-through output: forward value equals the selected codes,
    /// backward passes the gradient to the input unchanged.
    pub quantized: Tensor,
    /// The selected code rows, differentiable with respect to the codebook.
    pub selected: Tensor,
    /// Flattened nearest-code indices, one per input vector.
    pub indices: Vec<u32>,
    /// Shape of the input without its trailing code dimension.
    pub index_shape: Vec<usize>,
    /// Mean squared distance between inputs and their codes.
    pub commit_distance: f64,
}

/// Index of the nearest row of `codes` (row-major, `dim` wide) to `x`;
/// ties go to the lowest index.
pub fn nearest_code(x: &[f64], codes: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (k, code) in codes.chunks_exact(dim).enumerate() {
        let d: f64 = x.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Nearest-code quantization of `features` (`... x dim`) against `view`.
pub fn quantize(features: &Tensor, view: &ScaleView) -> Result<QuantizationResult> {
    let dims = features.dims().to_vec();
    let dim = *dims
        .last()
        .ok_or_else(|| Error::Argument("cannot quantize a scalar".into()))?;
    if dim != view.dim() {
        return Err(Error::Argument(format!(
            "feature dim {dim} does not match code dim {}",
            view.dim()
        )));
    }
    let x = nn::to_vec_f64(features)?;
    let codes = nn::to_vec_f64(view.codes())?;
    let mut indices = Vec::with_capacity(x.len() / dim.max(1));
    let mut total = 0.0;
    for v in x.chunks_exact(dim) {
        let (k, d) = nearest_code(v, &codes, dim);
        indices.push(k as u32);
        total += d;
    }
    let n = indices.len();
    let idx = Tensor::from_vec(indices.clone(), n, features.device())?;
    let selected = view.codes().index_select(&idx, 0)?.reshape(dims.as_slice())?;
    let quantized = (selected.detach() + (features - features.detach())?)?;
    Ok(QuantizationResult {
        quantized,
        selected,
        indices,
        index_shape: dims[..dims.len() - 1].to_vec(),
        commit_distance: if n == 0 { 0.0 } else { total / (n * dim) as f64 },
    })
}

/// Terms of the motion codebook loss.
#[derive(Debug, Clone)]
pub struct MotionVqLoss {
    pub total: Tensor,
    /// `lambda_recon,m * |M_hat - sg[M]|_1`
    pub reconstruction: Tensor,
    /// `|sg[E_M(M)] - F_hat|^2`
    pub codebook: Tensor,
    /// `beta * |sg[F_hat] - E_M(sg[M])|^2`
    pub commitment: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct VqWeights {
    pub lambda_recon_m: f64,
    pub beta: f64,
}

impl Default for VqWeights {
    fn default() -> Self {
        Self {
            lambda_recon_m: 32.0,
            beta: 0.25,
        }
    }
}

/// Motion codebook loss. `reconstructed` is `D_M(Q(E_M(sg[M])))`, `target`
/// the input flow (detached here), `encoded` is `E_M(sg[M])` and
/// `quantized` its quantization. Norms are means over elements.
pub fn vq_loss_motion(
    reconstructed: &Tensor,
    target: &Tensor,
    encoded: &Tensor,
    quantized: &QuantizationResult,
    weights: VqWeights,
) -> Result<MotionVqLoss> {
    let reconstruction =
        (nn::mean_abs(&(reconstructed - target.detach())?)? * weights.lambda_recon_m)?;
    let codebook = nn::mean_sq(&(encoded.detach() - &quantized.selected)?)?;
    let commitment = (nn::mean_sq(&(quantized.selected.detach() - encoded)?)? * weights.beta)?;
    let total = ((&reconstruction + &codebook)? + &commitment)?;
    Ok(MotionVqLoss {
        total,
        reconstruction,
        codebook,
        commitment,
    })
}

#[derive(Debug, Clone)]
pub struct AppearanceVqLoss {
    pub total: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
}

/// Appearance codebook loss (code-level terms only).
pub fn vq_loss_appearance(
    target: &Tensor,
    quantized: &QuantizationResult,
    beta: f64,
) -> Result<AppearanceVqLoss> {
    let codebook = nn::mean_sq(&(target.detach() - &quantized.selected)?)?;
    let commitment = (nn::mean_sq(&(quantized.selected.detach() - target)?)? * beta)?;
    Ok(AppearanceVqLoss {
        total: (&codebook + &commitment)?,
        codebook,
        commitment,
    })
}

/// Streaming code-usage histograms, one per scale.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UsageStats {
    histograms: Vec<Vec<u64>>,
}

impl UsageStats {
    /// `allocated[i]` is the number of codes allocated to scale `i + 1`.
    pub fn new(allocated: &[usize]) -> Self {
        Self {
            histograms: allocated.iter().map(|n| vec![0; *n]).collect(),
        }
    }

    pub fn for_codebook(cb: &Codebook) -> Self {
        let alloc: Vec<usize> = (1..=cb.n_scales())
            .map(|s| s * cb.n_codes() / cb.n_scales())
            .collect();
        Self::new(&alloc)
    }

    pub fn record(&mut self, scale: usize, indices: &[u32]) {
        let h = &mut self.histograms[scale - 1];
        for &i in indices {
            h[i as usize] += 1;
        }
    }

    pub fn histogram(&self, scale: usize) -> &[u64] {
        &self.histograms[scale - 1]
    }

    pub fn n_scales(&self) -> usize {
        self.histograms.len()
    }

    /// `exp(entropy)` of the usage distribution at `scale` (0 if unused).
    pub fn perplexity(&self, scale: usize) -> f64 {
        perplexity(self.histogram(scale))
    }

    /// Fraction of allocated codes never selected at `scale`.
    pub fn dead_fraction(&self, scale: usize) -> f64 {
        let h = self.histogram(scale);
        if h.is_empty() {
            return 0.0;
        }
        h.iter().filter(|c| **c == 0).count() as f64 / h.len() as f64
    }

    pub fn reset(&mut self) {
        for h in &mut self.histograms {
            h.iter_mut().for_each(|c| *c = 0);
        }
    }
}

pub fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / t;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

/// Exponential-moving-average codebook state (used when gradient updates
/// of the codes are disabled).
#[derive(Debug, Clone)]
pub struct EmaState {
    pub cluster_size: Vec<f64>,
    pub embed_sum: Vec<f64>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(codebook: &Codebook, decay: f64) -> Result<Self> {
        Ok(Self {
            cluster_size: vec![1.0; codebook.n_codes()],
            embed_sum: nn::to_vec_f64(codebook.codes())?,
            decay,
        })
    }

    /// Moves each allocated code towards the mean of the features assigned
    /// to it and writes the result into `var`.
    pub fn update(
        &mut self,
        codebook: &Codebook,
        var: &Var,
        features: &[f64],
        indices: &[u32],
        n_allocated: usize,
    ) -> Result<()> {
        let dim = codebook.dim();
        let mut counts = vec![0.0; n_allocated];
        let mut sums = vec![0.0; n_allocated * dim];
        for (v, &k) in features.chunks_exact(dim).zip(indices) {
            let k = k as usize;
            counts[k] += 1.0;
            for (s, x) in sums[k * dim..(k + 1) * dim].iter_mut().zip(v) {
                *s += x;
            }
        }
        let d = self.decay;
        let mut rows = Vec::with_capacity(n_allocated);
        for k in 0..n_allocated {
            self.cluster_size[k] = d * self.cluster_size[k] + (1.0 - d) * counts[k];
            for j in 0..dim {
                let e = &mut self.embed_sum[k * dim + j];
                *e = d * *e + (1.0 - d) * sums[k * dim + j];
            }
            let size = self.cluster_size[k].max(1e-5);
            let row = (0..dim).map(|j| self.embed_sum[k * dim + j] / size).collect();
            rows.push((k, row));
        }
        codebook.set_rows(var, &rows)
    }
}

/// Replaces the listed codes with randomly chosen feature vectors.
pub fn restart_codes<R: Rng>(
    codebook: &Codebook,
    var: &Var,
    dead: &[usize],
    features: &[f64],
    rng: &mut R,
) -> Result<()> {
    let dim = codebook.dim();
    let n = features.len() / dim;
    if n == 0 {
        return Ok(());
    }
    let rows: Vec<(usize, Vec<f64>)> = dead
        .iter()
        .map(|&k| {
            let pick = rng.random_range(0..n);
            (k, features[pick * dim..(pick + 1) * dim].to_vec())
        })
        .collect();
    codebook.set_rows(var, &rows)
}

/// Host copy of a codebook as `f32`, for serialization.
pub fn codes_f32(codebook: &Codebook) -> Result<Vec<f32>> {
    Ok(codebook
        .codes()
        .flatten_all()?
        .to_dtype(DType::F32)?
        .to_vec1::<f32>()?)
}
