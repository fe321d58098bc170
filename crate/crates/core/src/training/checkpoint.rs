//! Versioned checkpoint container.
//!
//! A checkpoint is a safetensors file. Tensors are stored under
//! `param/<name>`, `adam_g/{m,v}/<name>`, `adam_d/{m,v}/<name>` and
//! `ema/<codebook>/{cluster,embed}`; the header metadata carries the format
//! version, the run configuration (TOML), counters, usage histograms and a
//! SHA-256 digest of all tensor payloads.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use super::model::ParamGroup;
use super::optim::Adam;
use super::trainer::TrainState;
use crate::codebook::UsageStats;
use crate::config::Config;
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "facecomp-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn tensor_entry(t: &Tensor) -> Result<Entry> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    };
    Ok(Entry { dtype, shape, bytes })
}

fn f64_entry(values: &[f64]) -> Entry {
    Entry {
        dtype: Dtype::F64,
        shape: vec![values.len()],
        bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

fn view_to_tensor(view: &TensorView<'_>, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t.to_dtype(dtype)?)
}

fn view_to_f64(view: &TensorView<'_>) -> Result<Vec<f64>> {
    if view.dtype() != Dtype::F64 {
        return Err(Error::Checkpoint("expected f64 tensor".into()));
    }
    Ok(view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn digest<'a>(items: impl Iterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn add_adam(entries: &mut BTreeMap<String, Entry>, prefix: &str, opt: &Adam) -> Result<()> {
    for (name, (m, v)) in &opt.moments {
        entries.insert(format!("{prefix}/m/{name}"), tensor_entry(m)?);
        entries.insert(format!("{prefix}/v/{name}"), tensor_entry(v)?);
    }
    Ok(())
}

/// Serializes the full training state to bytes.
pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    for (name, var) in state.model.store().vars() {
        entries.insert(format!("param/{name}"), tensor_entry(var.as_tensor())?);
    }
    add_adam(&mut entries, "adam_g", &state.opt_g)?;
    add_adam(&mut entries, "adam_d", &state.opt_d)?;
    if let Some(ema) = state.ema_states() {
        for (name, e) in ["motion", "appearance"].iter().zip(ema) {
            entries.insert(format!("ema/{name}/cluster"), f64_entry(&e.cluster_size));
            entries.insert(format!("ema/{name}/embed"), f64_entry(&e.embed_sum));
        }
    }
    let sha = digest(entries.iter().map(|(k, e)| (k.as_str(), e.bytes.as_slice())));
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_NAME.to_string());
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("step".to_string(), state.step.to_string());
    meta.insert("seed".to_string(), state.seed.to_string());
    meta.insert("adam_g_t".to_string(), state.opt_g.t.to_string());
    meta.insert("adam_d_t".to_string(), state.opt_d.t.to_string());
    meta.insert("config".to_string(), toml::to_string(state.config()).expect("config serializes"));
    meta.insert(
        "usage".to_string(),
        serde_json::to_string(&(&state.motion_usage, &state.appearance_usage))?,
    );
    meta.insert("last_used".to_string(), serde_json::to_string(&state.last_used)?);
    meta.insert("payload_sha256".to_string(), sha);
    let views = entries
        .iter()
        .map(|(k, e)| Ok((k.clone(), TensorView::new(e.dtype, e.shape.clone(), &e.bytes).map_err(st_err)?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::tensor::serialize(views, Some(meta)).map_err(st_err)
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    // Write-then-rename so a crash never leaves a truncated file behind.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parsed and verified checkpoint.
pub struct Checkpoint<'a> {
    tensors: SafeTensors<'a>,
    meta: HashMap<String, String>,
    pub config: Config,
    pub step: u64,
}

impl<'a> Checkpoint<'a> {
    /// Parses `bytes`, checking format, version and payload digest.
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
        if meta.get("format").map(String::as_str) != Some(FORMAT_NAME) {
            return Err(Error::Checkpoint("not a facecomp checkpoint".into()));
        }
        let version: u32 = field(&meta, "format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let tensors = SafeTensors::deserialize(bytes).map_err(st_err)?;
        let mut names = tensors.names().into_iter().map(str::to_string).collect::<Vec<_>>();
        names.sort();
        let views = names
            .iter()
            .map(|n| tensors.tensor(n).map_err(st_err))
            .collect::<Result<Vec<_>>>()?;
        let sha = digest(names.iter().map(String::as_str).zip(views.iter().map(|v| v.data())));
        if meta.get("payload_sha256") != Some(&sha) {
            return Err(Error::Checkpoint("payload digest mismatch (corrupt file)".into()));
        }
        let config = Config::from_toml_str(meta.get("config").map(String::as_str).unwrap_or(""))?;
        let step = field(&meta, "step")?;
        Ok(Self {
            tensors,
            meta,
            config,
            step,
        })
    }

    fn tensor(&self, name: &str) -> Result<TensorView<'a>> {
        self.tensors
            .tensor(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn adam(&self, prefix: &str, t: u64, template: &Adam, dtype: DType, device: &Device) -> Result<Adam> {
        let mut opt = Adam::new(template.lr, template.beta1, template.beta2);
        opt.t = t;
        let mprefix = format!("{prefix}/m/");
        for name in self.tensors.names() {
            if let Some(var) = name.strip_prefix(&mprefix) {
                let m = view_to_tensor(&self.tensor(name)?, dtype, device)?;
                let v = view_to_tensor(&self.tensor(&format!("{prefix}/v/{var}"))?, dtype, device)?;
                opt.moments.insert(var.to_string(), (m, v));
            }
        }
        Ok(opt)
    }

    /// Copies the stored parameters of `groups` (all groups if `None`) into
    /// `state`, plus optimizer and bookkeeping state when loading everything.
    /// Nothing is modified unless every requested tensor is present with the
    /// right shape.
    pub fn restore_into(&self, state: &mut TrainState, groups: Option<&[ParamGroup]>) -> Result<()> {
        let dtype = state.model.dtype();
        let device = state.model.device().clone();
        let mut staged = Vec::new();
        for (name, var) in state.model.store().vars() {
            let wanted = match (groups, ParamGroup::of_var(&name)) {
                (None, _) => true,
                (Some(gs), Some(g)) => gs.contains(&g),
                (Some(_), None) => false,
            };
            if !wanted {
                continue;
            }
            let t = view_to_tensor(&self.tensor(&format!("param/{name}"))?, dtype, &device)?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            staged.push((var, t));
        }
        let full = groups.is_none();
        let extra = if full {
            let opt_g = self.adam("adam_g", field(&self.meta, "adam_g_t")?, &state.opt_g, dtype, &device)?;
            let opt_d = self.adam("adam_d", field(&self.meta, "adam_d_t")?, &state.opt_d, dtype, &device)?;
            let (mu, au): (UsageStats, UsageStats) = serde_json::from_str(meta_str(&self.meta, "usage")?)?;
            let last_used: [Vec<u64>; 2] = serde_json::from_str(meta_str(&self.meta, "last_used")?)?;
            let mut ema = Vec::new();
            if state.ema_states().is_some() {
                for name in ["motion", "appearance"] {
                    ema.push((
                        view_to_f64(&self.tensor(&format!("ema/{name}/cluster"))?)?,
                        view_to_f64(&self.tensor(&format!("ema/{name}/embed"))?)?,
                    ));
                }
            }
            Some((opt_g, opt_d, mu, au, last_used, ema))
        } else {
            None
        };
        for (var, t) in staged {
            var.set(&t)?;
        }
        if let Some((opt_g, opt_d, mu, au, last_used, ema)) = extra {
            state.opt_g = opt_g;
            state.opt_d = opt_d;
            state.motion_usage = mu;
            state.appearance_usage = au;
            state.last_used = last_used;
            state.step = self.step;
            state.seed = field(&self.meta, "seed")?;
            if let Some(states) = state.ema_states_mut() {
                for (s, (cluster, embed)) in states.iter_mut().zip(ema) {
                    s.cluster_size = cluster;
                    s.embed_sum = embed;
                }
            }
        }
        Ok(())
    }
}

fn meta_str<'m>(meta: &'m HashMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata field {key}")))
}

fn field<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
    meta_str(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad metadata field {key}")))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Rebuilds the full training state stored at `path`.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<TrainState> {
    let bytes = read(path)?;
    let ckpt = Checkpoint::parse(&bytes)?;
    let mut state = TrainState::new(&ckpt.config, device)?;
    ckpt.restore_into(&mut state, None)?;
    Ok(state)
}

/// Loads only the parameters of `groups` from `path` into `state`.
pub fn load_groups(state: &mut TrainState, path: &Path, groups: &[ParamGroup]) -> Result<()> {
    let bytes = read(path)?;
    Checkpoint::parse(&bytes)?.restore_into(state, Some(groups))
}
