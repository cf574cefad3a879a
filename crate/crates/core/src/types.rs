//! Domain types shared by every module.
//!
//! Grid convention: pixel centers sit at integer coordinates, `x` is the
//! column and `y` the row, origin top-left. Displacements are expressed in
//! pixels of the grid they live on. All buffers are row-major.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_grid, Error, Result};
use crate::real::Real;

/// Single-channel scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image pixel {i}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image without the finiteness scan; callers guarantee it.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self::from_raw(height, width, vec![value; height * width])
    }

    /// Evaluates `f(x, y)` at every pixel center.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|v| U::of(v.f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Multi-channel map laid out `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::LengthMismatch {
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::from_raw(channels, height, width, vec![T::zero(); channels * height * width])
    }

    pub fn from_channels(channels: Vec<Image<T>>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidArgument("feature map needs a channel".into()))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(channels.len() * h * w);
        for c in &channels {
            ensure_same_grid("feature channels", (h, w), c.dims())?;
            data.extend_from_slice(c.data());
        }
        Ok(Self::from_raw(channels.len(), h, w, data))
    }

    pub fn from_image(img: &Image<T>) -> Self {
        Self::from_raw(1, img.height(), img.width(), img.data().to_vec())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `(C, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_image(&self, c: usize) -> Image<T> {
        Image::from_raw(self.height, self.width, self.channel(c).to_vec())
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| U::of(v.f64())).collect(),
        )
    }
}

/// Per-frame acquisition record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub acquisition_time_ms: f64,
    pub label: String,
}

/// Unordered set of `L >= 2` frames on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence<T = f32> {
    frames: Vec<Image<T>>,
    meta: Option<Vec<FrameMeta>>,
}

impl<T: Real> Sequence<T> {
    pub fn new(frames: Vec<Image<T>>, meta: Option<Vec<FrameMeta>>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::TooFewFrames {
                min: 2,
                actual: frames.len(),
            });
        }
        let dims = frames[0].dims();
        for f in &frames[1..] {
            ensure_same_grid("sequence frames", dims, f.dims())?;
        }
        if let Some(m) = &meta {
            if m.len() != frames.len() {
                return Err(Error::LengthMismatch {
                    expected: frames.len(),
                    actual: m.len(),
                });
            }
        }
        Ok(Self { frames, meta })
    }

    /// Attaches acquisition times as metadata.
    pub fn with_times(frames: Vec<Image<T>>, times_ms: &[f64]) -> Result<Self> {
        let meta = times_ms
            .iter()
            .enumerate()
            .map(|(i, &t)| FrameMeta {
                acquisition_time_ms: t,
                label: format!("frame{i}"),
            })
            .collect();
        Self::new(frames, Some(meta))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn frames(&self) -> &[Image<T>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Image<T> {
        &self.frames[i]
    }

    pub fn meta(&self) -> Option<&[FrameMeta]> {
        self.meta.as_deref()
    }

    pub fn times_ms(&self) -> Option<Vec<f64>> {
        self.meta
            .as_ref()
            .map(|m| m.iter().map(|r| r.acquisition_time_ms).collect())
    }

    pub fn into_parts(self) -> (Vec<Image<T>>, Option<Vec<FrameMeta>>) {
        (self.frames, self.meta)
    }

    pub fn cast<U: Real>(&self) -> Sequence<U> {
        Sequence {
            frames: self.frames.iter().map(Image::cast).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Dense displacement field `u`, defining `phi(x) = x + u(x)`.
///
/// Components are stored as two planes.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T = f32> {
    height: usize,
    width: usize,
    dx: Vec<T>,
    dy: Vec<T>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(height: usize, width: usize, dx: Vec<T>, dy: Vec<T>) -> Result<Self> {
        let n = height * width;
        for plane in [&dx, &dy] {
            if plane.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: plane.len(),
                });
            }
            if plane.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("displacement component".into()));
            }
        }
        Ok(Self {
            height,
            width,
            dx,
            dy,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, dx: Vec<T>, dy: Vec<T>) -> Self {
        debug_assert_eq!(dx.len(), height * width);
        debug_assert_eq!(dy.len(), height * width);
        Self {
            height,
            width,
            dx,
            dy,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, T::zero(), T::zero())
    }

    pub fn constant(height: usize, width: usize, dx: T, dy: T) -> Self {
        let n = height * width;
        Self::from_raw(height, width, vec![dx; n], vec![dy; n])
    }

    /// Evaluates `f(x, y) -> (dx, dy)` at every grid point.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let n = height * width;
        let (mut dx, mut dy) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                dx.push(a);
                dy.push(b);
            }
        }
        Self::from_raw(height, width, dx, dy)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dx(&self) -> &[T] {
        &self.dx
    }

    pub fn dy(&self) -> &[T] {
        &self.dy
    }

    pub fn dx_mut(&mut self) -> &mut [T] {
        &mut self.dx
    }

    pub fn dy_mut(&mut self) -> &mut [T] {
        &mut self.dy
    }

    pub fn planes_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.dx, &mut self.dy)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (T, T) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn into_planes(self) -> (Vec<T>, Vec<T>) {
        (self.dx, self.dy)
    }

    /// Largest displacement magnitude.
    pub fn max_norm(&self) -> T {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .fold(T::zero(), T::max)
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::from_raw(
            self.height,
            self.width,
            self.dx.iter().map(|&v| v * s).collect(),
            self.dy.iter().map(|&v| v * s).collect(),
        )
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField::from_raw(
            self.height,
            self.width,
            self.dx.iter().map(|v| U::of(v.f64())).collect(),
            self.dy.iter().map(|v| U::of(v.f64())).collect(),
        )
    }
}

/// One displacement field per frame, all on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet<T = f32> {
    fields: Vec<DisplacementField<T>>,
}

impl<T: Real> TransformSet<T> {
    pub fn new(fields: Vec<DisplacementField<T>>) -> Result<Self> {
        if let Some(first) = fields.first() {
            for f in &fields[1..] {
                ensure_same_grid("transform set", first.dims(), f.dims())?;
            }
        }
        Ok(Self { fields })
    }

    pub fn zeros(len: usize, height: usize, width: usize) -> Self {
        Self {
            fields: vec![DisplacementField::zeros(height, width); len],
        }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.fields.first().map(DisplacementField::dims)
    }

    pub fn fields(&self) -> &[DisplacementField<T>] {
        &self.fields
    }

    pub fn fields_mut(&mut self) -> &mut [DisplacementField<T>] {
        &mut self.fields
    }

    pub fn field(&self, i: usize) -> &DisplacementField<T> {
        &self.fields[i]
    }

    pub fn into_fields(self) -> Vec<DisplacementField<T>> {
        self.fields
    }

    pub fn cast<U: Real>(&self) -> TransformSet<U> {
        TransformSet {
            fields: self.fields.iter().map(DisplacementField::cast).collect(),
        }
    }

    /// Largest absolute component difference against another set.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.fields
            .iter()
            .zip(&other.fields)
            .flat_map(|(a, b)| {
                a.dx.iter()
                    .zip(&b.dx)
                    .chain(a.dy.iter().zip(&b.dy))
                    .map(|(p, q)| (p.f64() - q.f64()).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Bijection on frame indices. Applying it to a list gives
/// `out[i] = in[mapping[i]]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    /// Zero-based mapping.
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::InvalidArgument(format!(
                    "not a bijection on 0..{}: {mapping:?}",
                    mapping.len()
                )));
            }
        }
        Ok(Self { mapping })
    }

    /// One-based mapping, e.g. `(2, 3, 1)`.
    pub fn from_one_based(mapping: &[usize]) -> Result<Self> {
        if mapping.contains(&0) {
            return Err(Error::InvalidArgument("one-based mapping contains 0".into()));
        }
        Self::new(mapping.iter().map(|&m| m - 1).collect())
    }

    pub fn identity(len: usize) -> Self {
        Self {
            mapping: (0..len).collect(),
        }
    }

    pub fn swap(len: usize, a: usize, b: usize) -> Self {
        let mut mapping: Vec<usize> = (0..len).collect();
        mapping.swap(a, b);
        Self { mapping }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..len).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// The single permutation equivalent to applying `self` and then `next`:
    /// `apply(apply(xs, self), next) == apply(xs, self.then(next))`.
    pub fn then(&self, next: &Permutation) -> Self {
        Self {
            mapping: next.mapping.iter().map(|&j| self.mapping[j]).collect(),
        }
    }

    pub fn apply<X: Clone>(&self, items: &[X]) -> Result<Vec<X>> {
        if items.len() != self.mapping.len() {
            return Err(Error::LengthMismatch {
                expected: self.mapping.len(),
                actual: items.len(),
            });
        }
        Ok(self.mapping.iter().map(|&m| items[m].clone()).collect())
    }
}

/// Small-integer class id per pixel; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Binary membership for one label.
    pub fn select(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
}

/// Landmarks across frames. The k-th landmark listed for a frame corresponds
/// to the k-th landmark of every other frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub points: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Self {
        Self { points }
    }

    pub fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        for p in &self.points {
            if p.frame >= frames {
                return Err(Error::InvalidArgument(format!(
                    "landmark frame {} >= {frames}",
                    p.frame
                )));
            }
            if !(0.0..width as f64).contains(&p.x) || !(0.0..height as f64).contains(&p.y) {
                return Err(Error::InvalidArgument(format!(
                    "landmark ({}, {}) outside {height}x{width}",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }

    /// Points grouped by frame, in listing order.
    pub fn by_frame(&self, frames: usize) -> Vec<Vec<(f64, f64)>> {
        let mut out = vec![Vec::new(); frames];
        for p in &self.points {
            if p.frame < frames {
                out[p.frame].push((p.x, p.y));
            }
        }
        out
    }

    pub fn frame_count(&self) -> usize {
        self.points.iter().map(|p| p.frame + 1).max().unwrap_or(0)
    }
}

/// Reorders frames (and metadata): frame `i` of the result is frame `p(i)`
/// of the input.
pub fn permute_sequence<T: Real>(seq: &Sequence<T>, p: &Permutation) -> Result<Sequence<T>> {
    let frames = p.apply(seq.frames())?;
    let meta = seq.meta().map(|m| p.apply(m)).transpose()?;
    Sequence::new(frames, meta)
}

pub fn permute_transforms<T: Real>(t: &TransformSet<T>, p: &Permutation) -> Result<TransformSet<T>> {
    Ok(TransformSet {
        fields: p.apply(t.fields())?,
    })
}

/// Per-frame min-max normalization to `[0, 1]`. Constant images map to zeros.
pub fn normalize_intensity<T: Real>(img: &Image<T>) -> Result<Image<T>> {
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalize_intensity input".into()));
    }
    let (lo, hi) = img.min_max();
    let range = hi - lo;
    if range <= T::zero() {
        return Ok(Image::zeros(img.height(), img.width()));
    }
    Ok(img.map(|v| ((v - lo) / range).min(T::one()).max(T::zero())))
}
