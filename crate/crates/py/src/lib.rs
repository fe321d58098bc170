//! Python bindings: sprite data, quantization, metrics and checkpoint
//! inference.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use facecomp::codebook::{nearest_code, perplexity};
use facecomp::toolkit::{metric_l1, metric_psnr, SpriteVideo};
use facecomp::training::{load_checkpoint, reenact};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn runtime(e: facecomp::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Interleaved RGB frames in `[0, 1]` of one seeded sprite video.
#[pyfunction]
fn sprite_frames(seed: u64, n_frames: usize, size: usize) -> Vec<Vec<f32>> {
    let video = SpriteVideo::generate(seed, n_frames, size);
    (0..n_frames).map(|f| video.scene(f).render()).collect()
}

/// Index of the nearest code for every feature row; ties go to the lowest index.
#[pyfunction]
fn nearest_codes(features: Vec<Vec<f64>>, codes: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let dim = codes.first().map(Vec::len).ok_or_else(|| PyValueError::new_err("empty codebook"))?;
    if codes.iter().chain(&features).any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows must all have the code dimension"));
    }
    let flat: Vec<f64> = codes.concat();
    Ok(features.iter().map(|f| nearest_code(f, &flat, dim).0).collect())
}

#[pyfunction]
#[pyo3(name = "perplexity")]
fn usage_perplexity(counts: Vec<u64>) -> f64 {
    perplexity(&counts)
}

#[pyfunction]
fn psnr(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    metric_psnr(&a, &b).map_err(runtime)
}

#[pyfunction]
fn l1(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    metric_l1(&a, &b).map_err(runtime)
}

/// Training step and configuration (TOML) stored in a checkpoint.
#[pyfunction]
fn checkpoint_info(path: PathBuf) -> PyResult<(u64, String)> {
    let state = load_checkpoint(&path, &Device::Cpu).map_err(runtime)?;
    Ok((state.step, state.config().to_toml()))
}

/// Animates `source` with each driving frame using a trained checkpoint.
#[pyfunction]
fn animate(py: Python<'_>, checkpoint: PathBuf, source: Vec<f32>, driving: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    py.detach(|| {
        let state = load_checkpoint(&checkpoint, &Device::Cpu)?;
        let size = state.config().model.image_size;
        if source.len() != size * size * 3 || driving.iter().any(|d| d.len() != size * size * 3) {
            return Err(facecomp::Error::Argument(format!("frames must be {size}x{size} RGB")));
        }
        reenact(&state.model, &source, &driving, size)
    })
    .map_err(runtime)
}

/// Shape of a `(B, C, H, W)` tensor built from interleaved frames; a cheap
/// check that the binding and the core agree on layout.
#[pyfunction]
fn frame_tensor_shape(frames: Vec<Vec<f32>>, size: usize) -> PyResult<Vec<usize>> {
    let refs: Vec<&[f32]> = frames.iter().map(Vec::as_slice).collect();
    let t: Tensor = facecomp::toolkit::FrameDataset::to_tensor(&refs, size, &Device::Cpu).map_err(runtime)?;
    Ok(t.dims().to_vec())
}

#[pymodule]
fn facecomp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(sprite_frames, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_codes, m)?)?;
    m.add_function(wrap_pyfunction!(usage_perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(l1, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(animate, m)?)?;
    m.add_function(wrap_pyfunction!(frame_tensor_shape, m)?)?;
    Ok(())
}
