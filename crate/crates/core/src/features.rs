//! Hand-crafted, contrast-insensitive auxiliary features.
//!
//! Stands in for a frozen per-frame feature network. Every frame is mapped
//! independently, so the set structure and permutation equivariance carry
//! over unchanged. Channels, in order:
//!
//! 1. gradient magnitude of the Gaussian-smoothed frame (σ = 1 px),
//! 2. locally contrast-normalized intensity over a 15 px window,
//! 3. absolute Laplacian of the smoothed frame.
//!
//! Each channel is min-max normalized on its own, then average-pooled by the
//! configured scale. Arithmetic runs in double precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::setagg::FeatureSet;
use crate::types::{FeatureMap, Image, Sequence};
use crate::warp::downsample_plane;

pub const SMOOTHING_SIGMA: f64 = 1.0;
pub const CONTRAST_WINDOW: usize = 15;
pub const CONTRAST_EPS: f64 = 1e-3;
pub const MAX_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    None,
    Handcrafted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub kind: FeatureKind,
    /// Leading channels kept, `1..=3`.
    pub channels: usize,
    /// Output grid divisor, one of 1, 2, 4.
    pub scale: usize,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        Self {
            kind: FeatureKind::Handcrafted,
            channels: MAX_CHANNELS,
            scale: 1,
        }
    }
}

impl FeatureExtractorSpec {
    pub fn disabled() -> Self {
        Self {
            kind: FeatureKind::None,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.kind != FeatureKind::None
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_CHANNELS).contains(&self.channels) {
            return Err(Error::InvalidArgument(format!(
                "feature channels must be in 1..={MAX_CHANNELS}, got {}",
                self.channels
            )));
        }
        if ![1, 2, 4].contains(&self.scale) {
            return Err(Error::InvalidArgument(format!(
                "feature scale must be 1, 2 or 4, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

#[inline]
fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable correlation with a symmetric odd-length kernel, border clamped.
pub(crate) fn separable(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * row[clamp_idx(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp_idx(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn gradient_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let d = |a: f64, b: f64, span: usize| if span == 0 { 0.0 } else { (a - b) / span as f64 };
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = d(p[y * w + x1], p[y * w + x0], x1 - x0);
            let gy = d(p[y1 * w + x], p[y0 * w + x], y1 - y0);
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn laplacian_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let at = |xx: i64, yy: i64| p[clamp_idx(yy, h) * w + clamp_idx(xx, w)];
            let (xi, yi) = (x as i64, y as i64);
            let lap = at(xi - 1, yi) + at(xi + 1, yi) + at(xi, yi - 1) + at(xi, yi + 1) - 4.0 * p[y * w + x];
            out[y * w + x] = lap.abs();
        }
    }
    out
}

fn local_contrast(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = vec![1.0 / CONTRAST_WINDOW as f64; CONTRAST_WINDOW];
    let mean = separable(p, h, w, &k);
    let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
    let mean_sq = separable(&sq, h, w, &k);
    p.iter()
        .zip(mean.iter().zip(&mean_sq))
        .map(|(v, (m, m2))| {
            let sd = (m2 - m * m).max(0.0).sqrt();
            (v - m) / (sd + CONTRAST_EPS)
        })
        .collect()
}

fn min_max(p: &mut [f64]) {
    let (lo, hi) = p
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    if span > 0.0 {
        p.iter_mut().for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
    } else {
        p.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Computes the first `spec.channels` hand-crafted channels of one frame.
pub fn extract_features<T: Real>(img: &Image<T>, spec: &FeatureExtractorSpec) -> Result<FeatureMap<T>> {
    spec.validate()?;
    if !spec.enabled() {
        return Err(Error::InvalidArgument("feature extraction is disabled".into()));
    }
    let (h, w) = img.dims();
    if h % spec.scale != 0 || w % spec.scale != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} grid is not divisible by feature scale {}",
            spec.scale
        )));
    }
    let v: Vec<f64> = img.data().iter().map(|x| x.f64()).collect();
    let smooth = separable(&v, h, w, &gaussian_kernel(SMOOTHING_SIGMA));
    let (oh, ow) = (h / spec.scale, w / spec.scale);
    let mut data = Vec::with_capacity(spec.channels * oh * ow);
    for c in 0..spec.channels {
        let mut ch = match c {
            0 => gradient_magnitude(&smooth, h, w),
            1 => local_contrast(&v, h, w),
            _ => laplacian_magnitude(&smooth, h, w),
        };
        min_max(&mut ch);
        let ch = if spec.scale > 1 { downsample_plane(&ch, h, w, spec.scale) } else { ch };
        data.extend(ch.into_iter().map(T::of));
    }
    Ok(FeatureMap::from_raw(spec.channels, oh, ow, data))
}

/// Frame-wise [`extract_features`].
pub fn extract_feature_set<T: Real>(seq: &Sequence<T>, spec: &FeatureExtractorSpec) -> Result<FeatureSet<T>> {
    let items = seq
        .frames()
        .iter()
        .map(|f| extract_features(f, spec))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(items)
}
