//! Spatial transformation: bilinear sampling with border clamping, field
//! composition, resampling between pyramid levels and Jacobian analysis.
//!
//! Every sampling operation clamps the sample position to the grid, so
//! out-of-bounds lookups return the nearest border value instead of a zero
//! pad.

use crate::error::{ensure_same_grid, Result};
use crate::real::Real;
use crate::types::{DisplacementField, FeatureMap, Image, LabelMask, TransformSet};

/// Precomputed bilinear lookups for one set of sample positions.
///
/// The same positions are usually applied to several planes (an image, its
/// feature channels, a displacement field), so weights and indices are
/// computed once.
#[derive(Debug, Clone)]
pub struct Sampler<T> {
    height: usize,
    width: usize,
    idx: Vec<[u32; 4]>,
    frac: Vec<(T, T)>,
    // false where the position was clamped, which zeroes the spatial derivative
    inside: Vec<(bool, bool)>,
}

#[inline]
fn locate<T: Real>(p: T, n: usize) -> (usize, usize, T, bool) {
    let max = T::of((n - 1) as f64);
    let inside = p >= T::zero() && p <= max;
    let c = p.max(T::zero()).min(max);
    let i0 = c.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - T::of(i0 as f64), inside)
}

impl<T: Real> Sampler<T> {
    /// Samples of a `height x width` plane at the given positions; the output
    /// has one value per position.
    pub fn new(height: usize, width: usize, xs: &[T], ys: &[T]) -> Self {
        debug_assert_eq!(xs.len(), ys.len());
        let mut idx = Vec::with_capacity(xs.len());
        let mut frac = Vec::with_capacity(xs.len());
        let mut inside = Vec::with_capacity(xs.len());
        for (&px, &py) in xs.iter().zip(ys) {
            let (x0, x1, fx, ix) = locate(px, width);
            let (y0, y1, fy, iy) = locate(py, height);
            idx.push([
                (y0 * width + x0) as u32,
                (y0 * width + x1) as u32,
                (y1 * width + x0) as u32,
                (y1 * width + x1) as u32,
            ]);
            frac.push((fx, fy));
            inside.push((ix, iy));
        }
        Self {
            height,
            width,
            idx,
            frac,
            inside,
        }
    }

    /// Positions `x + u(x)` on the field's own grid.
    pub fn from_field(field: &DisplacementField<T>) -> Self {
        let (h, w) = field.dims();
        let (xs, ys) = displaced_positions(field);
        Self::new(h, w, &xs, &ys)
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Grid of the sampled plane.
    pub fn source_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    fn weights(&self, k: usize) -> [T; 4] {
        let (fx, fy) = self.frac[k];
        let one = T::one();
        [
            (one - fx) * (one - fy),
            fx * (one - fy),
            (one - fx) * fy,
            fx * fy,
        ]
    }

    pub fn sample(&self, plane: &[T]) -> Vec<T> {
        (0..self.idx.len())
            .map(|k| {
                let w = self.weights(k);
                let i = self.idx[k];
                w[0] * plane[i[0] as usize]
                    + w[1] * plane[i[1] as usize]
                    + w[2] * plane[i[2] as usize]
                    + w[3] * plane[i[3] as usize]
            })
            .collect()
    }

    /// Sampled values plus the derivative of each sample with respect to its
    /// own x and y position.
    pub fn sample_with_grad(&self, plane: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let n = self.idx.len();
        let (mut v, mut gx, mut gy) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let one = T::one();
        for k in 0..n {
            let i = self.idx[k];
            let (fx, fy) = self.frac[k];
            let (p00, p01, p10, p11) = (
                plane[i[0] as usize],
                plane[i[1] as usize],
                plane[i[2] as usize],
                plane[i[3] as usize],
            );
            let w = self.weights(k);
            v.push(w[0] * p00 + w[1] * p01 + w[2] * p10 + w[3] * p11);
            let (ix, iy) = self.inside[k];
            gx.push(if ix && i[0] != i[1] {
                (one - fy) * (p01 - p00) + fy * (p11 - p10)
            } else {
                T::zero()
            });
            gy.push(if iy && i[0] != i[2] {
                (one - fx) * (p10 - p00) + fx * (p11 - p01)
            } else {
                T::zero()
            });
        }
        (v, gx, gy)
    }

    /// Adjoint of [`Sampler::sample`]: scatters per-sample values back onto
    /// the source plane with the bilinear weights.
    pub fn scatter(&self, values: &[T], out: &mut [T]) {
        for (k, &g) in values.iter().enumerate() {
            let w = self.weights(k);
            let i = self.idx[k];
            for c in 0..4 {
                out[i[c] as usize] = out[i[c] as usize] + w[c] * g;
            }
        }
    }
}

/// `x + u(x)` for every grid point, as separate x and y planes.
pub fn displaced_positions<T: Real>(field: &DisplacementField<T>) -> (Vec<T>, Vec<T>) {
    let (h, w) = field.dims();
    let mut xs = Vec::with_capacity(h * w);
    let mut ys = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            xs.push(T::of(x as f64) + field.dx()[i]);
            ys.push(T::of(y as f64) + field.dy()[i]);
        }
    }
    (xs, ys)
}

/// `out(x) = img(x + u(x))`, bilinear, border-clamped.
pub fn warp_image<T: Real>(img: &Image<T>, field: &DisplacementField<T>) -> Result<Image<T>> {
    ensure_same_grid("warp_image", img.dims(), field.dims())?;
    let s = Sampler::from_field(field);
    Ok(Image::from_raw(img.height(), img.width(), s.sample(img.data())))
}

/// Warps every channel of a feature map with one field.
pub fn warp_feature_map<T: Real>(
    map: &FeatureMap<T>,
    field: &DisplacementField<T>,
) -> Result<FeatureMap<T>> {
    ensure_same_grid("warp_feature_map", map.dims(), field.dims())?;
    let s = Sampler::from_field(field);
    let mut data = Vec::with_capacity(map.data().len());
    for c in 0..map.channels() {
        data.extend(s.sample(map.channel(c)));
    }
    Ok(FeatureMap::from_raw(map.channels(), map.height(), map.width(), data))
}

/// Nearest-neighbour warp for label maps.
pub fn warp_labels<T: Real>(mask: &LabelMask, field: &DisplacementField<T>) -> Result<LabelMask> {
    ensure_same_grid("warp_labels", mask.dims(), field.dims())?;
    let (h, w) = mask.dims();
    Ok(LabelMask::from_fn(h, w, |x, y| {
        let (dx, dy) = field.at(x, y);
        let sx = (x as f64 + dx.f64()).round().clamp(0.0, (w - 1) as f64) as usize;
        let sy = (y as f64 + dy.f64()).round().clamp(0.0, (h - 1) as f64) as usize;
        mask.get(sx, sy)
    }))
}

/// Warps a whole set of images, one field per image.
pub fn warp_all<T: Real>(frames: &[Image<T>], t: &TransformSet<T>) -> Result<Vec<Image<T>>> {
    frames
        .iter()
        .zip(t.fields())
        .map(|(f, u)| warp_image(f, u))
        .collect()
}

/// `outer ∘ inner`: `u(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose<T: Real>(
    outer: &DisplacementField<T>,
    inner: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    ensure_same_grid("compose", outer.dims(), inner.dims())?;
    let s = Sampler::from_field(inner);
    Ok(compose_with(&s, outer, inner))
}

/// Composition with a sampler already built from `inner`.
pub(crate) fn compose_with<T: Real>(
    inner_sampler: &Sampler<T>,
    outer: &DisplacementField<T>,
    inner: &DisplacementField<T>,
) -> DisplacementField<T> {
    let ox = inner_sampler.sample(outer.dx());
    let oy = inner_sampler.sample(outer.dy());
    let dx = inner.dx().iter().zip(ox).map(|(&a, b)| a + b).collect();
    let dy = inner.dy().iter().zip(oy).map(|(&a, b)| a + b).collect();
    DisplacementField::from_raw(inner.height(), inner.width(), dx, dy)
}

/// Source coordinate on a grid `factor` times coarser, for pixel centers
/// aligned with block averaging.
#[inline]
fn coarse_coord(fine: usize, factor: usize) -> f64 {
    (fine as f64 - (factor as f64 - 1.0) / 2.0) / factor as f64
}

/// Bilinear upsampling of a plane by an integer factor (block-center
/// aligned, border-clamped).
pub fn upsample_plane<T: Real>(plane: &[T], height: usize, width: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (height * factor, width * factor);
    let mut xs = Vec::with_capacity(oh * ow);
    let mut ys = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            xs.push(T::of(coarse_coord(x, factor)));
            ys.push(T::of(coarse_coord(y, factor)));
        }
    }
    Sampler::new(height, width, &xs, &ys).sample(plane)
}

/// Upsamples a field to a grid `factor` times finer. Displacement values
/// are multiplied by `factor` because they are measured in pixels.
pub fn upsample_field<T: Real>(field: &DisplacementField<T>, factor: usize) -> DisplacementField<T> {
    assert!(factor >= 1, "upsample factor must be positive");
    if factor == 1 {
        return field.clone();
    }
    let (h, w) = field.dims();
    let s = T::of(factor as f64);
    let dx = upsample_plane(field.dx(), h, w, factor)
        .into_iter()
        .map(|v| v * s)
        .collect();
    let dy = upsample_plane(field.dy(), h, w, factor)
        .into_iter()
        .map(|v| v * s)
        .collect();
    DisplacementField::from_raw(h * factor, w * factor, dx, dy)
}

/// Block average of a plane; dimensions must be divisible by `factor`.
pub fn downsample_plane<T: Real>(plane: &[T], height: usize, width: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (height / factor, width / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for cy in 0..oh {
        for cx in 0..ow {
            let mut acc = 0.0;
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    acc += plane[y * width + x].f64();
                }
            }
            out.push(T::of(acc * norm));
        }
    }
    out
}

pub fn downsample_image<T: Real>(img: &Image<T>, factor: usize) -> Image<T> {
    let (h, w) = img.dims();
    Image::from_raw(h / factor, w / factor, downsample_plane(img.data(), h, w, factor))
}

/// Block-averaged field with values divided by `factor`.
pub fn downsample_field<T: Real>(field: &DisplacementField<T>, factor: usize) -> DisplacementField<T> {
    if factor == 1 {
        return field.clone();
    }
    let (h, w) = field.dims();
    let s = T::of(1.0 / factor as f64);
    let dx = downsample_plane(field.dx(), h, w, factor)
        .into_iter()
        .map(|v| v * s)
        .collect();
    let dy = downsample_plane(field.dy(), h, w, factor)
        .into_iter()
        .map(|v| v * s)
        .collect();
    DisplacementField::from_raw(h / factor, w / factor, dx, dy)
}

/// Partial derivatives of a plane along x and y: central differences in the
/// interior, one-sided on the border ring.
pub(crate) fn gradient_plane<T: Real>(p: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let half = T::of(0.5);
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if w < 2 {
                T::zero()
            } else if x == 0 {
                p[i + 1] - p[i]
            } else if x == w - 1 {
                p[i] - p[i - 1]
            } else {
                (p[i + 1] - p[i - 1]) * half
            };
            gy[i] = if h < 2 {
                T::zero()
            } else if y == 0 {
                p[i + w] - p[i]
            } else if y == h - 1 {
                p[i] - p[i - w]
            } else {
                (p[i + w] - p[i - w]) * half
            };
        }
    }
    (gx, gy)
}

/// `det(I + ∇u)` at every grid point.
pub fn jacobian_det<T: Real>(field: &DisplacementField<T>) -> Image<T> {
    let (h, w) = field.dims();
    let (uxx, uxy) = gradient_plane(field.dx(), h, w);
    let (uyx, uyy) = gradient_plane(field.dy(), h, w);
    let one = T::one();
    let data = (0..h * w)
        .map(|i| (one + uxx[i]) * (one + uyy[i]) - uxy[i] * uyx[i])
        .collect();
    Image::from_raw(h, w, data)
}

/// Bilinear, border-clamped lookup of a field at a real-valued position.
pub fn sample_field_at<T: Real>(field: &DisplacementField<T>, x: f64, y: f64) -> (f64, f64) {
    let (h, w) = field.dims();
    let s = Sampler::new(h, w, &[T::of(x)], &[T::of(y)]);
    (s.sample(field.dx())[0].f64(), s.sample(field.dy())[0].f64())
}

/// Solves `p + u(p) = target` for `p` by fixed-point iteration.
pub fn invert_point<T: Real>(field: &DisplacementField<T>, target: (f64, f64), iterations: usize) -> (f64, f64) {
    let (mut px, mut py) = target;
    for _ in 0..iterations {
        let (ux, uy) = sample_field_at(field, px, py);
        px = target.0 - ux;
        py = target.1 - uy;
    }
    (px, py)
}

/// Approximate inverse field `v` with `v(x) = -u(x + v(x))`, by fixed-point
/// iteration. Converges for fields whose Jacobian stays well away from
/// folding.
pub fn invert_field<T: Real>(field: &DisplacementField<T>, iterations: usize) -> DisplacementField<T> {
    let (h, w) = field.dims();
    let mut inv = DisplacementField::zeros(h, w);
    for _ in 0..iterations {
        let s = Sampler::from_field(&inv);
        let dx = s.sample(field.dx()).into_iter().map(|v| -v).collect();
        let dy = s.sample(field.dy()).into_iter().map(|v| -v).collect();
        inv = DisplacementField::from_raw(h, w, dx, dy);
    }
    inv
}
