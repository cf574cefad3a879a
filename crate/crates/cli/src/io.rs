//! On-disk formats.
//!
//! Images, fields and parameter vectors are raw little-endian `f32` with a
//! JSON sidecar `<file>.json` holding `{"dtype","shape","order"}`; masks are
//! raw `u8` with the same sidecar. Landmarks and times are small CSV files.
//! Every writer is deterministic, so saving a loaded artifact reproduces
//! the original bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use setreg::pipeline::{PipelineParams, PipelineSpec};
use setreg::{DisplacementField, Image, LabelMask, Landmark, LandmarkSet, Sequence, TransformSet};

use crate::error::{CliError, CliResult};

const ROW_MAJOR: &str = "row-major";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> CliResult<V> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.into(),
        source,
    })
}

fn write_tensor(path: &Path, dtype: &str, shape: &[usize], bytes: &[u8]) -> CliResult<()> {
    let sidecar = Sidecar {
        dtype: dtype.into(),
        shape: shape.to_vec(),
        order: ROW_MAJOR.into(),
    };
    let text = serde_json::to_string(&sidecar).map_err(|source| CliError::Json {
        path: path.into(),
        source,
    })?;
    write_bytes(path, bytes)?;
    write_bytes(&sidecar_path(path), format!("{text}\n").as_bytes())
}

fn read_tensor(path: &Path, dtype: &str, width: usize) -> CliResult<(Vec<usize>, Vec<u8>)> {
    let sidecar: Sidecar = read_json(&sidecar_path(path))?;
    if sidecar.dtype != dtype {
        return Err(CliError::format(path, format!("dtype {} where {dtype} was expected", sidecar.dtype)));
    }
    if sidecar.order != ROW_MAJOR {
        return Err(CliError::format(path, format!("unsupported order {}", sidecar.order)));
    }
    let bytes = read_bytes(path)?;
    let count: usize = sidecar.shape.iter().product();
    if bytes.len() != count * width {
        return Err(CliError::format(
            path,
            format!("{} bytes for shape {:?}", bytes.len(), sidecar.shape),
        ));
    }
    Ok((sidecar.shape, bytes))
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> CliResult<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_tensor(path, "f32", shape, &bytes)
}

pub fn read_f32(path: &Path) -> CliResult<(Vec<usize>, Vec<f32>)> {
    let (shape, bytes) = read_tensor(path, "f32", 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

pub fn write_u8(path: &Path, shape: &[usize], data: &[u8]) -> CliResult<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    write_tensor(path, "u8", shape, data)
}

pub fn read_u8(path: &Path) -> CliResult<(Vec<usize>, Vec<u8>)> {
    read_tensor(path, "u8", 1)
}

fn expect_rank(path: &Path, shape: &[usize], rank: usize) -> CliResult<()> {
    if shape.len() != rank {
        return Err(CliError::format(path, format!("shape {shape:?} is not rank {rank}")));
    }
    Ok(())
}

/// Frames as `[L, H, W]`.
pub fn save_frames(path: &Path, frames: &[Image<f32>]) -> CliResult<()> {
    let (h, w) = frames.first().map_or((0, 0), |f| f.dims());
    let data: Vec<f32> = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    write_f32(path, &[frames.len(), h, w], &data)
}

pub fn load_frames(path: &Path) -> CliResult<Vec<Image<f32>>> {
    let (shape, data) = read_f32(path)?;
    expect_rank(path, &shape, 3)?;
    let n = shape[1] * shape[2];
    if n == 0 {
        return Ok(Vec::new());
    }
    data.chunks_exact(n)
        .map(|c| Ok(Image::new(shape[1], shape[2], c.to_vec())?))
        .collect()
}

/// One 2-D map as `[H, W]`, stored in single precision.
pub fn save_map(path: &Path, img: &Image<f64>) -> CliResult<()> {
    let data: Vec<f32> = img.data().iter().map(|&v| v as f32).collect();
    write_f32(path, &[img.height(), img.width()], &data)
}

/// Transforms as `[L, 2, H, W]`, `dx` plane before `dy`.
pub fn save_transforms(path: &Path, t: &TransformSet<f32>) -> CliResult<()> {
    let (h, w) = t.dims().unwrap_or((0, 0));
    let data: Vec<f32> = t
        .fields()
        .iter()
        .flat_map(|f| f.dx().iter().chain(f.dy()).copied())
        .collect();
    write_f32(path, &[t.len(), 2, h, w], &data)
}

pub fn load_transforms(path: &Path) -> CliResult<TransformSet<f32>> {
    let (shape, data) = read_f32(path)?;
    expect_rank(path, &shape, 4)?;
    if shape[1] != 2 {
        return Err(CliError::format(path, format!("shape {shape:?} has no 2 displacement planes")));
    }
    let (h, w) = (shape[2], shape[3]);
    let n = h * w;
    if n == 0 {
        return Err(CliError::format(path, "empty grid"));
    }
    let fields = data
        .chunks_exact(2 * n)
        .map(|c| DisplacementField::new(h, w, c[..n].to_vec(), c[n..].to_vec()))
        .collect::<setreg::Result<Vec<_>>>()?;
    Ok(TransformSet::new(fields)?)
}

/// Label masks as `[L, H, W]`.
pub fn save_masks(path: &Path, masks: &[LabelMask]) -> CliResult<()> {
    let (h, w) = masks.first().map_or((0, 0), |m| m.dims());
    let data: Vec<u8> = masks.iter().flat_map(|m| m.labels().iter().copied()).collect();
    write_u8(path, &[masks.len(), h, w], &data)
}

/// Accepts `[L, H, W]` or a single `[H, W]` mask.
pub fn load_masks(path: &Path) -> CliResult<Vec<LabelMask>> {
    let (shape, data) = read_u8(path)?;
    let (h, w) = match shape.as_slice() {
        [_, h, w] | [h, w] => (*h, *w),
        _ => return Err(CliError::format(path, format!("mask shape {shape:?}"))),
    };
    if h * w == 0 {
        return Err(CliError::format(path, "empty grid"));
    }
    data.chunks_exact(h * w)
        .map(|c| Ok(LabelMask::new(h, w, c.to_vec())?))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    frame: usize,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TimeRow {
    frame: usize,
    t_ms: f64,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.into(),
        source,
    }
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::format(path, e.to_string()))?;
    write_bytes(path, &bytes)
}

fn read_rows<R: DeserializeOwned>(path: &Path) -> CliResult<Vec<R>> {
    let bytes = read_bytes(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(csv_err(path))
}

pub fn save_landmarks(path: &Path, set: &LandmarkSet) -> CliResult<()> {
    write_rows(
        path,
        set.points.iter().map(|p| LandmarkRow {
            frame: p.frame,
            x: p.x,
            y: p.y,
        }),
    )
}

pub fn load_landmarks(path: &Path) -> CliResult<LandmarkSet> {
    let rows: Vec<LandmarkRow> = read_rows(path)?;
    Ok(LandmarkSet::new(
        rows.into_iter()
            .map(|r| Landmark {
                frame: r.frame,
                x: r.x,
                y: r.y,
            })
            .collect(),
    ))
}

pub fn save_times(path: &Path, times: &[f64]) -> CliResult<()> {
    write_rows(
        path,
        times.iter().enumerate().map(|(frame, &t_ms)| TimeRow { frame, t_ms }),
    )
}

/// Times ordered by frame index; the indices must be `0..L`.
pub fn load_times(path: &Path) -> CliResult<Vec<f64>> {
    let mut rows: Vec<TimeRow> = read_rows(path)?;
    rows.sort_by_key(|r| r.frame);
    if rows.iter().enumerate().any(|(i, r)| r.frame != i) {
        return Err(CliError::format(path, "frame indices are not 0..L"));
    }
    Ok(rows.into_iter().map(|r| r.t_ms).collect())
}

fn spec_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".spec.json");
    PathBuf::from(s)
}

/// Flat parameter vector plus `<file>.spec.json` with the architecture.
pub fn save_pipeline(path: &Path, params: &PipelineParams) -> CliResult<()> {
    let flat = params.to_flat();
    write_f32(path, &[flat.len()], &flat)?;
    write_json(&spec_path(path), &params.spec)
}

pub fn load_pipeline(path: &Path) -> CliResult<PipelineParams> {
    let spec: PipelineSpec = read_json(&spec_path(path))?;
    let (shape, flat) = read_f32(path)?;
    expect_rank(path, &shape, 1)?;
    Ok(PipelineParams::from_flat(spec, &flat)?)
}

/// 8-bit grayscale PNG with `[lo, hi]` mapped linearly onto `[0, 255]`.
pub fn save_png(path: &Path, img: &Image<f64>, window: (f64, f64)) -> CliResult<()> {
    let (lo, hi) = window;
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let pixels: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| {
            let t = if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            (t * 255.0).round() as u8
        })
        .collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, pixels)
        .ok_or_else(|| CliError::format(path, "pixel buffer size"))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    buf.save(path).map_err(|source| CliError::Png {
        path: path.into(),
        source,
    })
}

/// Sequence with times from `times.csv` next to the frames when present.
pub fn load_sequence(frames: &Path, times: Option<&Path>) -> CliResult<Sequence<f32>> {
    let imgs = load_frames(frames)?;
    match times {
        Some(t) => {
            let times = load_times(t)?;
            Ok(Sequence::with_times(imgs, &times)?)
        }
        None => Ok(Sequence::new(imgs, None)?),
    }
}
