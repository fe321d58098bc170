//! PNG, visualization and binary dump helpers.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::codebook::{codes_f32, Codebook, CodebookKind};
use crate::error::{Error, Result};
use crate::flowcore::FlowField;

pub const FLOW_MAGIC: [u8; 4] = *b"FCFL";
pub const FEATURE_MAGIC: [u8; 4] = *b"FCFT";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"FCCB";

/// Reads an image as interleaved RGB `f32` in `[0, 1]`; returns `(data, w, h)`.
pub fn read_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().iter().map(|b| *b as f32 / 255.0).collect();
    Ok((data, w as usize, h as usize))
}

pub fn write_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::Argument("pixel buffer does not match image size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn write_gray_png(path: &Path, gray: &[u8], width: usize, height: usize) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, gray.to_vec())
        .ok_or_else(|| Error::Argument("pixel buffer does not match image size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// 8-bit RGB pixels of a `(3, H, W)` tensor in `[0, 1]`.
pub fn image_to_rgb8(image: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Argument(format!("expected 3 channels, got {c}")));
    }
    let hwc = image.permute((1, 2, 0))?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok((hwc.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(), w, h))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (rgb, w, h) = image_to_rgb8(image)?;
    write_png(path, &rgb, w, h)
}

/// Middlebury colour wheel.
fn color_wheel() -> Vec<[f64; 3]> {
    let segments = [(15, 0), (6, 1), (4, 2), (11, 3), (13, 4), (6, 5)];
    let mut wheel = Vec::with_capacity(55);
    for (n, kind) in segments {
        for i in 0..n {
            let t = i as f64 / n as f64;
            wheel.push(match kind {
                0 => [1.0, t, 0.0],
                1 => [1.0 - t, 1.0, 0.0],
                2 => [0.0, 1.0, t],
                3 => [0.0, 1.0 - t, 1.0],
                4 => [t, 0.0, 1.0],
                _ => [1.0, 0.0, 1.0 - t],
            });
        }
    }
    wheel
}

/// Colour-wheel rendering of per-pixel displacements `(u, v)`; hue encodes
/// direction and saturation magnitude relative to `max_radius`.
pub fn displacement_to_rgb(uv: &[[f64; 2]], max_radius: f64) -> Vec<u8> {
    let wheel = color_wheel();
    let n = wheel.len() as f64;
    let mut out = Vec::with_capacity(uv.len() * 3);
    for &[u, v] in uv {
        let (u, v) = (u / max_radius.max(1e-9), v / max_radius.max(1e-9));
        let r = (u * u + v * v).sqrt();
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (n - 1.0);
        let k0 = fk.floor() as usize % wheel.len();
        let k1 = (k0 + 1) % wheel.len();
        let f = fk - fk.floor();
        for ch in 0..3 {
            let col = (1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch];
            let col = if r <= 1.0 { 1.0 - r * (1.0 - col) } else { col * 0.75 };
            out.push((col * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Displacements in pixels of batch element `b` of a flow.
pub fn flow_displacement_px(flow: &FlowField, b: usize) -> Result<Vec<[f64; 2]>> {
    let (h, w) = flow.resolution();
    let disp = flow.displacement()?.get(b)?;
    let v = crate::nn::to_vec_f64(&disp)?;
    Ok(v.chunks_exact(2)
        .map(|p| [p[0] * w as f64 / 2.0, p[1] * h as f64 / 2.0])
        .collect())
}

/// Writes the colour-wheel PNG of one flow; returns the max radius used.
pub fn save_flow_png(path: &Path, flow: &FlowField, b: usize) -> Result<f64> {
    let (h, w) = flow.resolution();
    let uv = flow_displacement_px(flow, b)?;
    let max_r = uv.iter().map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).fold(0.0, f64::max);
    write_png(path, &displacement_to_rgb(&uv, max_r.max(1.0)), w, h)?;
    Ok(max_r)
}

/// Channel-mean grayscale PNG of a `(C, H, W)` feature, min-max normalized.
pub fn save_feature_png(path: &Path, feature: &Tensor) -> Result<()> {
    let (_, h, w) = feature.dims3()?;
    let mean = crate::nn::to_vec_f64(&feature.mean(0)?)?;
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let gray: Vec<u8> = mean.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
    write_gray_png(path, &gray, w, h)
}

/// Shaped binary dump: 4-byte magic, `u32` rank, `u32` dims, then
/// little-endian `f32` values in row-major order.
pub fn tensor_dump_bytes(magic: [u8; 4], t: &Tensor) -> Result<Vec<u8>> {
    let dims = t.dims();
    let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a dump written by [`tensor_dump_bytes`]; returns `(magic, dims, values)`.
pub fn parse_tensor_dump(bytes: &[u8]) -> Result<([u8; 4], Vec<usize>, Vec<f32>)> {
    let bad = || Error::Argument("truncated tensor dump".into());
    let u32_at = |o: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(bytes.get(o..o + 4).ok_or_else(bad)?.try_into().expect("4 bytes")))
    };
    let magic: [u8; 4] = bytes.get(..4).ok_or_else(bad)?.try_into().expect("4 bytes");
    let rank = u32_at(4)? as usize;
    let dims = (0..rank).map(|i| u32_at(8 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let n: usize = dims.iter().product();
    let body = bytes.get(start..start + 4 * n).ok_or_else(bad)?;
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((magic, dims, values))
}

pub fn write_tensor_dump(path: &Path, magic: [u8; 4], t: &Tensor) -> Result<()> {
    std::fs::write(path, tensor_dump_bytes(magic, t)?).map_err(|e| Error::io(path, e))
}

/// Codebook dump: 16-byte header (`"FCCB"`, `u32` n_codes, `u32` dim,
/// `u32` kind; 0 = motion, 1 = appearance) followed by little-endian `f32` codes.
pub fn codebook_dump_bytes(cb: &Codebook) -> Result<Vec<u8>> {
    let codes = codes_f32(cb)?;
    let mut out = Vec::with_capacity(16 + 4 * codes.len());
    out.extend_from_slice(&CODEBOOK_MAGIC);
    out.extend_from_slice(&(cb.n_codes() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
    out.extend_from_slice(&cb.kind().tag().to_le_bytes());
    for v in codes {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a codebook dump into `(kind, n_codes, dim, codes)`.
pub fn parse_codebook_dump(bytes: &[u8]) -> Result<(CodebookKind, usize, usize, Vec<f32>)> {
    if bytes.len() < 16 || bytes[..4] != CODEBOOK_MAGIC {
        return Err(Error::Argument("not a codebook dump".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let (n, dim) = (word(1) as usize, word(2) as usize);
    let kind = CodebookKind::from_tag(word(3)).ok_or_else(|| Error::Argument("unknown codebook kind".into()))?;
    if bytes.len() != 16 + 4 * n * dim {
        return Err(Error::Argument("codebook dump has the wrong length".into()));
    }
    let codes = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((kind, n, dim, codes))
}

/// True when an `ffmpeg` binary is callable.
pub fn ffmpeg_available() -> bool {
    std::process::Command::new("ffmpeg")
        .arg("-version")
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

/// Encodes `<dir>/%04d.png` into `out` with ffmpeg. Returns false when no
/// encoder is installed.
pub fn encode_mp4(dir: &Path, out: &Path, fps: u32) -> Result<bool> {
    if !ffmpeg_available() {
        return Ok(false);
    }
    let status = std::process::Command::new("ffmpeg")
        .args(["-y", "-loglevel", "error", "-framerate", &fps.to_string(), "-i"])
        .arg(dir.join("%04d.png"))
        .args(["-pix_fmt", "yuv420p", "-vf", "scale=trunc(iw/2)*2:trunc(ih/2)*2"])
        .arg(out)
        .status()
        .map_err(|e| Error::io(out, e))?;
    Ok(status.success())
}

/// Appends one JSON line to `path`.
pub fn append_jsonl<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn tensor_dump_round_trip() {
        let t = Tensor::arange(0f32, 24.0, &Device::Cpu).unwrap().reshape((2, 3, 4)).unwrap();
        let bytes = tensor_dump_bytes(FLOW_MAGIC, &t).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 12 + 96);
        let (magic, dims, values) = parse_tensor_dump(&bytes).unwrap();
        assert_eq!(magic, FLOW_MAGIC);
        assert_eq!(dims, vec![2, 3, 4]);
        assert_eq!(values[23], 23.0);
    }

    #[test]
    fn codebook_dump_header() {
        let codes = Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let cb = Codebook::from_codes(codes, 2, CodebookKind::Appearance).unwrap();
        let bytes = codebook_dump_bytes(&cb).unwrap();
        assert_eq!(&bytes[..4], b"FCCB");
        assert_eq!(bytes.len(), 16 + 16);
        let (kind, n, dim, v) = parse_codebook_dump(&bytes).unwrap();
        assert_eq!((kind, n, dim), (CodebookKind::Appearance, 2, 2));
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_displacement_is_white_and_directions_differ() {
        let px = displacement_to_rgb(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], 1.0);
        assert_eq!(&px[..3], &[255, 255, 255]);
        assert_ne!(&px[3..6], &px[6..9]);
    }
}
