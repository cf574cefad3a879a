//! Soft joint histograms, conditional template entropy (CTE), displacement
//! regularizers and the weighted total loss with analytic gradients.
//!
//! Histograms use a Gaussian Parzen window measured in bin widths. The
//! window is tapered to reach zero at 3σ with vanishing first and second
//! derivatives, which keeps the loss twice continuously differentiable in
//! the sample values. Intensities must
//! lie in `[0, 1]`; value `v` sits at bin coordinate `v * (bins - 1)`.
//!
//! Entropies are in nats. The conditional entropy of the template given a
//! frame is computed from one normalized joint table, `H(T, I) - H(I)`, with
//! `H(I)` taken from the table's marginal.
//!
//! Aggregation weights are recomputed on every evaluation but enter the
//! gradient as constants.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_grid, Error, Result};
use crate::real::Real;
use crate::setagg::{set_weights, weighted_sum, Aggregation, AggregationWeights};
use crate::types::{DisplacementField, FeatureMap, Image, Sequence, TransformSet};
use crate::warp::{downsample_field, Sampler};

const RANGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramConfig {
    pub bins: usize,
    /// Parzen window standard deviation in bin widths.
    pub kernel_sigma: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            kernel_sigma: 1.0,
        }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 8 {
            return Err(Error::InvalidArgument(format!("bins must be >= 8, got {}", self.bins)));
        }
        if !(self.kernel_sigma > 0.0) || !self.kernel_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kernel_sigma must be positive, got {}",
                self.kernel_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: 0.5,
            lambda_s: 10.0,
            lambda_c: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_f", self.lambda_f),
            ("lambda_s", self.lambda_s),
            ("lambda_c", self.lambda_c),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, cte_image: f64, cte_feature: f64, smooth: f64, cyclic: f64) -> f64 {
        cte_image + self.lambda_f * cte_feature + self.lambda_s * smooth + self.lambda_c * cyclic
    }
}

/// Scalar loss terms of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub cte_image: f64,
    pub cte_feature: f64,
    pub smooth: f64,
    pub cyclic: f64,
    pub total: f64,
}

/// Loss terms, the gradient of the total with respect to every displacement
/// component, and the aggregation weights that built the templates.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T = f32> {
    pub cte_image: f64,
    pub cte_feature: f64,
    pub smooth: f64,
    pub cyclic: f64,
    pub total: f64,
    pub grad: TransformSet<T>,
    pub image_weights: AggregationWeights,
    pub feature_weights: Option<AggregationWeights>,
    /// Time spent computing aggregation weights and templates.
    pub aggregation_time: Duration,
}

impl<T> LossBreakdown<T> {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            cte_image: self.cte_image,
            cte_feature: self.cte_feature,
            smooth: self.smooth,
            cyclic: self.cyclic,
            total: self.total,
        }
    }
}

/// Tapered Gaussian window evaluated on a run of consecutive bins.
struct Kernel {
    bins: usize,
    sigma: f64,
    /// Half-width of the evaluated run, `ceil(3σ)` bins.
    radius: usize,
    taper: f64,
    inv_2s2: f64,
    inv_s2: f64,
    /// `exp(-k^2 / 2σ^2)` for the recurrence over the run.
    ck: Vec<f64>,
}

impl Kernel {
    fn new(cfg: &HistogramConfig) -> Self {
        let sigma = cfg.kernel_sigma;
        let radius = (3.0 * sigma).ceil().max(1.0) as usize;
        let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
        let ck = (0..2 * radius).map(|k| (-((k * k) as f64) * inv_2s2).exp()).collect();
        Self {
            bins: cfg.bins,
            sigma,
            radius,
            taper: (-4.5f64).exp(),
            inv_2s2,
            inv_s2: 1.0 / (sigma * sigma),
            ck,
        }
    }

    fn stride(&self) -> usize {
        2 * self.radius
    }

    /// Side of the padded table; in-range bins occupy `radius..radius + bins`.
    fn padded(&self) -> usize {
        self.bins + 2 * self.radius
    }

    fn scale(&self) -> f64 {
        (self.bins - 1) as f64
    }

    /// Window values and their derivatives with respect to the bin
    /// coordinate for the run starting at the returned padded index.
    #[inline]
    fn eval(&self, v: f64, w: &mut [f64], dw: &mut [f64]) -> usize {
        let p = v.clamp(0.0, 1.0) * self.scale();
        let j0 = p.floor() as i64 - self.radius as i64 + 1;
        let d0 = j0 as f64 - p;
        // exp(-(d0 + k)^2 / 2σ^2) = e0 * q^k * ck[k]: two exponentials per sample
        let e0 = (-d0 * d0 * self.inv_2s2).exp();
        let q = (-d0 * self.inv_s2).exp();
        let cut = 3.0 * self.sigma;
        let mut qk = 1.0;
        for k in 0..self.stride() {
            let d = d0 + k as f64;
            let g = e0 * qk * self.ck[k];
            qk *= q;
            if d.abs() < cut {
                let t = d * d * self.inv_2s2 - 4.5;
                w[k] = g - self.taper * (1.0 - t + 0.5 * t * t);
                dw[k] = d * self.inv_s2 * (g - self.taper * (1.0 - t));
            } else {
                w[k] = 0.0;
                dw[k] = 0.0;
            }
        }
        (j0 + self.radius as i64) as usize
    }
}

/// Window runs for every sample of one axis.
struct AxisData {
    start: Vec<u32>,
    w: Vec<f64>,
    dw: Vec<f64>,
}

impl AxisData {
    fn new<I: ExactSizeIterator<Item = f64>>(k: &Kernel, values: I) -> Self {
        let s = k.stride();
        let n = values.len();
        let mut start = Vec::with_capacity(n);
        let mut w = vec![0.0; n * s];
        let mut dw = vec![0.0; n * s];
        for (i, v) in values.enumerate() {
            start.push(k.eval(v, &mut w[i * s..(i + 1) * s], &mut dw[i * s..(i + 1) * s]) as u32);
        }
        Self { start, w, dw }
    }

    fn len(&self) -> usize {
        self.start.len()
    }
}

/// Unnormalized padded joint table, template on rows.
fn joint_counts(k: &Kernel, t: &AxisData, f: &AxisData) -> Vec<f64> {
    let (s, pw) = (k.stride(), k.padded());
    let mut r = vec![0.0; pw * pw];
    for n in 0..t.len() {
        let (a0, b0) = (t.start[n] as usize, f.start[n] as usize);
        let kb = &f.w[n * s..(n + 1) * s];
        for (i, &ka) in t.w[n * s..(n + 1) * s].iter().enumerate() {
            if ka == 0.0 {
                continue;
            }
            let row = &mut r[(a0 + i) * pw + b0..(a0 + i) * pw + b0 + s];
            for (cell, &b) in row.iter_mut().zip(kb) {
                *cell += ka * b;
            }
        }
    }
    r
}

/// In-range part of a padded table.
fn crop(k: &Kernel, r: &[f64]) -> Vec<f64> {
    let (b, pw, o) = (k.bins, k.padded(), k.radius);
    (0..b)
        .flat_map(|a| (0..b).map(move |c| (a, c)))
        .map(|(a, c)| r[(a + o) * pw + c + o])
        .collect()
}

/// `H(T | I)` of a `bins x bins` count table (template on rows) and, when
/// requested, its derivative with respect to every cell.
fn conditional_entropy(counts: &[f64], bins: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let z: f64 = counts.iter().sum();
    if !(z > 0.0) {
        return (0.0, want_grad.then(|| vec![0.0; counts.len()]));
    }
    let mut q = vec![0.0; bins];
    for a in 0..bins {
        for b in 0..bins {
            q[b] += counts[a * bins + b];
        }
    }
    // -ln(p_ab / q_b) with p and q from the same normalization
    let mut nl = vec![0.0; counts.len()];
    let mut hc = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let r = counts[a * bins + b];
            if r > 0.0 {
                let v = -(r / q[b]).ln();
                nl[a * bins + b] = v;
                hc += r / z * v;
            }
        }
    }
    let grad = want_grad.then(|| {
        counts
            .iter()
            .zip(&nl)
            .map(|(&r, &v)| if r > 0.0 { (v - hc) / z } else { 0.0 })
            .collect()
    });
    (hc, grad)
}

/// Conditional entropy of the template given one item, plus derivatives
/// with respect to the item's samples and the template's samples.
fn item_term(k: &Kernel, t: &AxisData, f: &AxisData, want_grad: bool) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let padded = joint_counts(k, t, f);
    let (hc, g) = conditional_entropy(&crop(k, &padded), k.bins, want_grad);
    let Some(g) = g else { return (hc, None) };
    let (s, pw, o, b) = (k.stride(), k.padded(), k.radius, k.bins);
    let mut gp = vec![0.0; pw * pw];
    for a in 0..b {
        gp[(a + o) * pw + o..(a + o) * pw + o + b].copy_from_slice(&g[a * b..(a + 1) * b]);
    }
    let scale = k.scale();
    let n = t.len();
    let mut d_item = vec![0.0; n];
    let mut d_tmpl = vec![0.0; n];
    for i in 0..n {
        let (a0, b0) = (t.start[i] as usize, f.start[i] as usize);
        let (ka, dka) = (&t.w[i * s..(i + 1) * s], &t.dw[i * s..(i + 1) * s]);
        let (kb, dkb) = (&f.w[i * s..(i + 1) * s], &f.dw[i * s..(i + 1) * s]);
        let (mut gi, mut gt) = (0.0, 0.0);
        for r in 0..s {
            let row = &gp[(a0 + r) * pw + b0..(a0 + r) * pw + b0 + s];
            let (mut sb, mut sdb) = (0.0, 0.0);
            for c in 0..s {
                sb += row[c] * kb[c];
                sdb += row[c] * dkb[c];
            }
            gi += ka[r] * sdb;
            gt += dka[r] * sb;
        }
        d_item[i] = gi * scale;
        d_tmpl[i] = gt * scale;
    }
    (hc, Some((d_item, d_tmpl)))
}

/// Mean conditional template entropy of a set of items against a template
/// built from them with weights `w`, and the gradient of that mean with
/// respect to each item when `want_grad` is set. The template's dependence
/// on the items enters through `w` held fixed.
fn set_cte(
    k: &Kernel,
    items: &[Vec<f64>],
    template: &[f64],
    w: &AggregationWeights,
    want_grad: bool,
) -> (f64, Option<Vec<Vec<f64>>>) {
    let l = items.len() as f64;
    let t = AxisData::new(k, template.iter().copied());
    let parts: Vec<(f64, Option<(Vec<f64>, Vec<f64>)>)> = items
        .par_iter()
        .map(|it| item_term(k, &t, &AxisData::new(k, it.iter().copied()), want_grad))
        .collect();
    let value = parts.iter().map(|p| p.0).sum::<f64>() / l;
    if !want_grad {
        return (value, None);
    }
    // d/dT summed in frame order for a reproducible reduction
    let mut g_t = vec![0.0; template.len()];
    for (_, g) in &parts {
        for (acc, v) in g_t.iter_mut().zip(&g.as_ref().unwrap().1) {
            *acc += v / l;
        }
    }
    let grads = parts
        .into_iter()
        .zip(w.as_slice())
        .map(|((_, g), &wj)| {
            let (d_item, _) = g.unwrap();
            d_item.iter().zip(&g_t).map(|(d, gt)| d / l + wj * gt).collect()
        })
        .collect();
    (value, Some(grads))
}

fn check_range<T: Real>(what: &str, data: &[T]) -> Result<()> {
    for v in data {
        let v = v.f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(what.into()));
        }
        if v < -RANGE_TOLERANCE || v > 1.0 + RANGE_TOLERANCE {
            return Err(Error::InvalidArgument(format!("{what} has value {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Normalized `bins x bins` Parzen joint histogram, `a` on rows.
pub fn soft_joint_histogram<T: Real>(a: &Image<T>, b: &Image<T>, cfg: &HistogramConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    ensure_same_grid("soft_joint_histogram", a.dims(), b.dims())?;
    check_range("histogram input a", a.data())?;
    check_range("histogram input b", b.data())?;
    let k = Kernel::new(cfg);
    let ta = AxisData::new(&k, a.data().iter().map(|v| v.f64()));
    let tb = AxisData::new(&k, b.data().iter().map(|v| v.f64()));
    let counts = crop(&k, &joint_counts(&k, &ta, &tb));
    let z: f64 = counts.iter().sum();
    Ok(DMatrix::from_row_iterator(cfg.bins, cfg.bins, counts.into_iter().map(|c| c / z)))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(h: &DMatrix<f64>) -> Result<f64> {
    if h.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::InvalidDistribution("entries must be finite and >= 0".into()));
    }
    let s: f64 = h.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("entries sum to {s}")));
    }
    Ok(-h.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// `(1/L) Σ_i [H(T, I_i) - H(I_i)]` for already warped frames.
pub fn cte<T: Real>(warped: &Sequence<T>, template: &Image<T>, cfg: &HistogramConfig) -> Result<f64> {
    cfg.validate()?;
    ensure_same_grid("cte template", warped.dims(), template.dims())?;
    check_range("template", template.data())?;
    for f in warped.frames() {
        check_range("warped frame", f.data())?;
    }
    let k = Kernel::new(cfg);
    let items: Vec<Vec<f64>> = warped.frames().iter().map(|f| f.data().iter().map(|v| v.f64()).collect()).collect();
    let t: Vec<f64> = template.data().iter().map(|v| v.f64()).collect();
    let w = AggregationWeights::uniform(items.len());
    Ok(set_cte(&k, &items, &t, &w, false).0)
}

/// Mean over frames, pixels and components of the squared forward-difference
/// gradient magnitude. Differences past the last row or column are zero.
pub fn smoothness<T: Real>(t: &TransformSet<T>) -> f64 {
    smoothness_grad(t, false).0
}

fn plane_smoothness<T: Real>(p: &[T], h: usize, w: usize, grad: Option<&mut [f64]>) -> f64 {
    let mut s = 0.0;
    let at = |i: usize| p[i].f64();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d = at(i + 1) - at(i);
                s += d * d;
            }
            if y + 1 < h {
                let d = at(i + w) - at(i);
                s += d * d;
            }
        }
    }
    if let Some(g) = grad {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut acc = 0.0;
                if x + 1 < w {
                    acc -= 2.0 * (at(i + 1) - at(i));
                }
                if x > 0 {
                    acc += 2.0 * (at(i) - at(i - 1));
                }
                if y + 1 < h {
                    acc -= 2.0 * (at(i + w) - at(i));
                }
                if y > 0 {
                    acc += 2.0 * (at(i) - at(i - w));
                }
                g[i] = acc;
            }
        }
    }
    s
}

/// Value and per-frame `(d/du_x, d/du_y)` of the smoothness term.
fn smoothness_grad<T: Real>(t: &TransformSet<T>, want_grad: bool) -> (f64, Vec<(Vec<f64>, Vec<f64>)>) {
    let Some((h, w)) = t.dims() else { return (0.0, Vec::new()) };
    let norm = 1.0 / (t.len() * h * w * 2) as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for f in t.fields() {
        if want_grad {
            let (mut gx, mut gy) = (vec![0.0; h * w], vec![0.0; h * w]);
            total += plane_smoothness(f.dx(), h, w, Some(&mut gx));
            total += plane_smoothness(f.dy(), h, w, Some(&mut gy));
            gx.iter_mut().chain(gy.iter_mut()).for_each(|g| *g *= norm);
            grads.push((gx, gy));
        } else {
            total += plane_smoothness(f.dx(), h, w, None);
            total += plane_smoothness(f.dy(), h, w, None);
        }
    }
    (total * norm, grads)
}

/// Mean over pixels of the squared norm of the frame-averaged displacement.
pub fn cyclic<T: Real>(t: &TransformSet<T>) -> f64 {
    cyclic_mean(t).0
}

/// Value and the per-pixel mean displacement `(m_x, m_y)`.
fn cyclic_mean<T: Real>(t: &TransformSet<T>) -> (f64, Vec<f64>, Vec<f64>) {
    let Some((h, w)) = t.dims() else { return (0.0, Vec::new(), Vec::new()) };
    let n = h * w;
    let l = t.len() as f64;
    let (mut mx, mut my) = (vec![0.0; n], vec![0.0; n]);
    for f in t.fields() {
        for i in 0..n {
            mx[i] += f.dx()[i].f64();
            my[i] += f.dy()[i].f64();
        }
    }
    mx.iter_mut().chain(my.iter_mut()).for_each(|v| *v /= l);
    let v = mx.iter().zip(&my).map(|(a, b)| a * a + b * b).sum::<f64>() / n as f64;
    (v, mx, my)
}

/// How aggregation weights are obtained during a loss evaluation.
#[derive(Debug, Clone)]
pub enum TemplateWeights<'a> {
    /// Recompute from the warped set.
    Compute(Aggregation),
    /// Use the given weights for images and, if present, features.
    Fixed {
        image: &'a AggregationWeights,
        feature: Option<&'a AggregationWeights>,
    },
}

/// Frames and optional features that the total loss warps.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, T> {
    /// Source frames normalized to `[0, 1]`.
    pub frames: &'a [Image<T>],
    /// Source feature maps with channels in `[0, 1]`, on the frame grid or on
    /// a grid coarser by an integer factor.
    pub features: Option<&'a [FeatureMap<T>]>,
}

impl<'a, T: Real> LossInputs<'a, T> {
    pub fn new(frames: &'a [Image<T>], features: Option<&'a [FeatureMap<T>]>) -> Self {
        Self { frames, features }
    }

    /// Checks lengths, grids and the `[0, 1]` range.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::TooFewFrames { min: 2, actual: 0 });
        };
        if self.frames.len() < 2 {
            return Err(Error::TooFewFrames {
                min: 2,
                actual: self.frames.len(),
            });
        }
        for f in self.frames {
            ensure_same_grid("loss frame", first.dims(), f.dims())?;
            check_range("loss frame", f.data())?;
        }
        if let Some(fs) = self.features {
            if fs.len() != self.frames.len() {
                return Err(Error::LengthMismatch {
                    expected: self.frames.len(),
                    actual: fs.len(),
                });
            }
            feature_scale(first.dims(), fs[0].dims())?;
            for f in fs {
                if f.shape() != fs[0].shape() {
                    return Err(Error::ShapeMismatch("feature maps differ in shape".into()));
                }
                check_range("feature map", f.data())?;
            }
        }
        Ok(())
    }
}

fn feature_scale(frame: (usize, usize), feat: (usize, usize)) -> Result<usize> {
    let (h, w) = frame;
    let (fh, fw) = feat;
    if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 || h / fh != w / fw {
        return Err(Error::ShapeMismatch(format!(
            "feature grid {fh}x{fw} is not an integer reduction of {h}x{w}"
        )));
    }
    Ok(h / fh)
}

/// Total loss with recomputed correlation-weighted (or mean) templates.
pub fn total_loss<T: Real>(
    inputs: &LossInputs<'_, T>,
    fields: &TransformSet<T>,
    agg: Aggregation,
    weights: &LossWeights,
    cfg: &HistogramConfig,
) -> Result<LossBreakdown<T>> {
    evaluate(inputs, fields, TemplateWeights::Compute(agg), weights, cfg)
}

/// Total loss and gradient.
///
/// Frames (and features) are warped by the fields, templates are the
/// weighted sums of the warped sets, and the gradient is taken with the
/// weights held constant.
pub fn evaluate<T: Real>(
    inputs: &LossInputs<'_, T>,
    fields: &TransformSet<T>,
    template_weights: TemplateWeights<'_>,
    weights: &LossWeights,
    cfg: &HistogramConfig,
) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    weights.validate()?;
    inputs.validate()?;
    let frames = inputs.frames;
    let l = frames.len();
    if fields.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            actual: fields.len(),
        });
    }
    let (h, w) = frames[0].dims();
    ensure_same_grid("loss fields", (h, w), fields.dims().unwrap_or((0, 0)))?;
    let k = Kernel::new(cfg);
    let mut agg_time = Duration::ZERO;

    // image term
    let samplers: Vec<Sampler<T>> = fields.fields().par_iter().map(Sampler::from_field).collect();
    let sampled: Vec<(Vec<T>, Vec<T>, Vec<T>)> = samplers
        .par_iter()
        .zip(frames.par_iter())
        .map(|(s, f)| s.sample_with_grad(f.data()))
        .collect();
    let clock = Instant::now();
    let warped: Vec<&[T]> = sampled.iter().map(|s| s.0.as_slice()).collect();
    let image_w = match &template_weights {
        TemplateWeights::Compute(mode) => set_weights(&warped, *mode)?,
        TemplateWeights::Fixed { image, .. } => (*image).clone(),
    };
    if image_w.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            actual: image_w.len(),
        });
    }
    let template: Vec<f64> = weighted_sum(&warped, &image_w)?.into_iter().map(|v| v.f64()).collect();
    agg_time += clock.elapsed();
    let items: Vec<Vec<f64>> = warped.iter().map(|s| s.iter().map(|v| v.f64()).collect()).collect();
    let (cte_image, d_img) = set_cte(&k, &items, &template, &image_w, true);
    let d_img = d_img.unwrap();
    drop(items);

    let mut gx: Vec<Vec<f64>> = Vec::with_capacity(l);
    let mut gy: Vec<Vec<f64>> = Vec::with_capacity(l);
    for (j, (_, sx, sy)) in sampled.iter().enumerate() {
        gx.push(d_img[j].iter().zip(sx).map(|(d, g)| d * g.f64()).collect());
        gy.push(d_img[j].iter().zip(sy).map(|(d, g)| d * g.f64()).collect());
    }
    drop(sampled);

    // feature term
    let mut cte_feature = 0.0;
    let mut feature_w = None;
    if let (Some(feats), true) = (inputs.features, weights.lambda_f > 0.0) {
        let s = feature_scale((h, w), feats[0].dims())?;
        let (c, fh, fw) = feats[0].shape();
        let fsamplers: Vec<Sampler<T>> = if s == 1 {
            samplers
        } else {
            fields
                .fields()
                .par_iter()
                .map(|f| Sampler::from_field(&downsample_field(f, s)))
                .collect()
        };
        // per frame: warped channels concatenated, and per-channel spatial derivatives
        let fsampled: Vec<(Vec<T>, Vec<Vec<T>>, Vec<Vec<T>>)> = fsamplers
            .par_iter()
            .zip(feats.par_iter())
            .map(|(sm, fm)| {
                let mut vals = Vec::with_capacity(c * fh * fw);
                let (mut dx, mut dy) = (Vec::with_capacity(c), Vec::with_capacity(c));
                for ch in 0..c {
                    let (v, a, b) = sm.sample_with_grad(fm.channel(ch));
                    vals.extend(v);
                    dx.push(a);
                    dy.push(b);
                }
                (vals, dx, dy)
            })
            .collect();
        let clock = Instant::now();
        let fwarped: Vec<&[T]> = fsampled.iter().map(|s| s.0.as_slice()).collect();
        let fw_weights = match &template_weights {
            TemplateWeights::Compute(mode) => set_weights(&fwarped, *mode)?,
            TemplateWeights::Fixed { feature: Some(fw), .. } => (*fw).clone(),
            TemplateWeights::Fixed { feature: None, .. } => {
                return Err(Error::InvalidArgument("fixed feature weights missing".into()))
            }
        };
        let ftemplate: Vec<f64> = weighted_sum(&fwarped, &fw_weights)?.into_iter().map(|v| v.f64()).collect();
        agg_time += clock.elapsed();
        let fitems: Vec<Vec<f64>> = fwarped.iter().map(|s| s.iter().map(|v| v.f64()).collect()).collect();
        let (value, d_feat) = set_cte(&k, &fitems, &ftemplate, &fw_weights, true);
        cte_feature = value;
        let d_feat = d_feat.unwrap();
        let np = fh * fw;
        let lf = weights.lambda_f;
        // chain through the field downsampling: block average then division by s
        let back = 1.0 / (s * s * s) as f64;
        for j in 0..l {
            let (_, dxs, dys) = &fsampled[j];
            let (mut cx, mut cy) = (vec![0.0; np], vec![0.0; np]);
            for ch in 0..c {
                let d = &d_feat[j][ch * np..(ch + 1) * np];
                for i in 0..np {
                    cx[i] += d[i] * dxs[ch][i].f64();
                    cy[i] += d[i] * dys[ch][i].f64();
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let ci = (y / s) * fw + x / s;
                    gx[j][y * w + x] += lf * back * cx[ci];
                    gy[j][y * w + x] += lf * back * cy[ci];
                }
            }
        }
        feature_w = Some(fw_weights);
    }

    // regularizers
    let (smooth, sgrad) = smoothness_grad(fields, weights.lambda_s > 0.0);
    if weights.lambda_s > 0.0 {
        for j in 0..l {
            for i in 0..h * w {
                gx[j][i] += weights.lambda_s * sgrad[j].0[i];
                gy[j][i] += weights.lambda_s * sgrad[j].1[i];
            }
        }
    }
    let (cyc, mx, my) = cyclic_mean(fields);
    if weights.lambda_c > 0.0 {
        let c = weights.lambda_c * 2.0 / ((h * w) as f64 * l as f64);
        for j in 0..l {
            for i in 0..h * w {
                gx[j][i] += c * mx[i];
                gy[j][i] += c * my[i];
            }
        }
    }

    let total = weights.combine(cte_image, cte_feature, smooth, cyc);
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let grad = TransformSet::new(
        gx.into_iter()
            .zip(gy)
            .map(|(a, b)| {
                DisplacementField::from_raw(h, w, a.into_iter().map(T::of).collect(), b.into_iter().map(T::of).collect())
            })
            .collect(),
    )?;
    Ok(LossBreakdown {
        cte_image,
        cte_feature,
        smooth,
        cyclic: cyc,
        total,
        grad,
        image_weights: image_w,
        feature_weights: feature_w,
        aggregation_time: agg_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_features, FeatureExtractorSpec};
    use crate::types::{permute_transforms, Permutation};
    use crate::warp::warp_image;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Tapered window written out directly.
    fn oracle_window(d: f64, s: f64) -> f64 {
        if d.abs() >= 3.0 * s {
            0.0
        } else {
            // Gaussian minus its second-order expansion in d^2 about the cutoff
            let t = d * d / (2.0 * s * s) - 4.5;
            (-d * d / (2.0 * s * s)).exp() - (-4.5f64).exp() * (1.0 - t + t * t / 2.0)
        }
    }

    /// Per-pixel scatter over the full bin grid, no runs or padding.
    fn oracle_histogram(a: &[f64], b: &[f64], bins: usize, s: f64) -> Vec<f64> {
        let mut r = vec![0.0; bins * bins];
        for (&va, &vb) in a.iter().zip(b) {
            for i in 0..bins {
                for j in 0..bins {
                    r[i * bins + j] += oracle_window(i as f64 - va * (bins - 1) as f64, s)
                        * oracle_window(j as f64 - vb * (bins - 1) as f64, s);
                }
            }
        }
        let z: f64 = r.iter().sum();
        r.iter().map(|v| v / z).collect()
    }

    fn oracle_entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }

    /// `H(T, I) - H(I)` from a brute-force table.
    fn oracle_conditional(t: &[f64], f: &[f64], bins: usize, s: f64) -> f64 {
        let p = oracle_histogram(t, f, bins, s);
        let mut q = vec![0.0; bins];
        for a in 0..bins {
            for b in 0..bins {
                q[b] += p[a * bins + b];
            }
        }
        oracle_entropy(&p) - oracle_entropy(&q)
    }

    fn textured(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        Image::from_fn(h, w, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            (0.5 + 0.3 * (0.45 * xf + 6.0 * a).sin() * (0.35 * yf + 6.0 * b).cos() + 0.15 * (0.6 * (xf - yf) + c).sin())
                .clamp(0.0, 1.0)
        })
    }

    #[test]
    fn window_vanishes_smoothly_at_cutoff() {
        let k = Kernel::new(&HistogramConfig::default());
        let (mut w, mut dw) = (vec![0.0; 6], vec![0.0; 6]);
        // the first run entry sits just inside 3σ
        let p = 10.0 - 1e-9;
        let start = k.eval(p / 31.0, &mut w, &mut dw);
        assert_eq!(start, 7 + 3);
        assert!(w[0].abs() < 1e-8 && dw[0].abs() < 1e-8);
        for (i, (&wi, &di)) in w.iter().zip(&dw).enumerate() {
            let d = (start + i) as f64 - 3.0 - p;
            assert!((wi - oracle_window(d, 1.0)).abs() < 1e-12);
            let fd = (oracle_window(d - 1e-6, 1.0) - oracle_window(d + 1e-6, 1.0)) / 2e-6;
            assert!((di - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_pair_gives_single_diagonal_blob() {
        let a = Image::filled(4, 4, 0.5f64);
        let h = soft_joint_histogram(&a, &a, &HistogramConfig::default()).unwrap();
        assert!((h.sum() - 1.0).abs() < 1e-12);
        // 0.5 maps to bin coordinate 15.5: the blob is symmetric about it
        assert!((h[(15, 15)] - h[(16, 16)]).abs() < 1e-15);
        assert!((h[(15, 16)] - h[(16, 15)]).abs() < 1e-15);
        let (r, c) = h.iter().enumerate().fold((0, 0.0), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        let (row, col) = (r % 32, r / 32);
        assert!((15..=16).contains(&row) && (15..=16).contains(&col), "{c}");
    }

    #[test]
    fn identical_images_concentrate_on_diagonal_band() {
        let a = textured(16, 16, 3);
        let h = soft_joint_histogram(&a, &a, &HistogramConfig::default()).unwrap();
        let off: f64 = (0..32)
            .flat_map(|i| (0..32).map(move |j| (i, j)))
            .filter(|(i, j)| (*i as i64 - *j as i64).abs() > 6)
            .map(|(i, j)| h[(i, j)])
            .sum();
        assert_eq!(off, 0.0);
    }

    #[test]
    fn histogram_matches_scatter_oracle() {
        // independent two-level images
        let a = Image::from_fn(8, 8, |x, _| if x % 2 == 0 { 0.2 } else { 0.8f64 });
        let b = Image::from_fn(8, 8, |_, y| if y % 2 == 0 { 0.1 } else { 0.65f64 });
        for cfg in [HistogramConfig::default(), HistogramConfig { bins: 16, kernel_sigma: 0.7 }] {
            let h = soft_joint_histogram(&a, &b, &cfg).unwrap();
            let o = oracle_histogram(a.data(), b.data(), cfg.bins, cfg.kernel_sigma);
            for i in 0..cfg.bins {
                for j in 0..cfg.bins {
                    assert!((h[(i, j)] - o[i * cfg.bins + j]).abs() < 1e-10);
                }
            }
        }
        // edge values lose mass outside the table; normalization covers it
        let c = textured(8, 8, 1);
        let e = Image::from_fn(8, 8, |x, y| ((x + y) % 3) as f64 / 2.0);
        let h = soft_joint_histogram(&c, &e, &HistogramConfig::default()).unwrap();
        let o = oracle_histogram(c.data(), e.data(), 32, 1.0);
        for i in 0..32 {
            for j in 0..32 {
                assert!((h[(i, j)] - o[i * 32 + j]).abs() < 1e-10, "{i} {j}: {} vs {}", h[(i, j)], o[i * 32 + j]);
            }
        }
    }

    #[test]
    fn histogram_rejects_out_of_range_input() {
        let a = Image::filled(4, 4, 0.5f64);
        let b = Image::filled(4, 4, 1.01f64);
        assert!(soft_joint_histogram(&a, &b, &HistogramConfig::default()).is_err());
        let c = Image::filled(4, 4, 1.0 + 1e-7);
        assert!(soft_joint_histogram(&a, &c, &HistogramConfig::default()).is_ok());
    }

    #[test]
    fn entropy_examples() {
        let one_hot = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(entropy(&one_hot).unwrap(), 0.0);
        let uniform = DMatrix::from_element(2, 2, 0.25);
        assert!((entropy(&uniform).unwrap() - 1.386294).abs() < 1e-6);
        let three = DMatrix::from_row_slice(1, 3, &[0.5, 0.25, 0.25]);
        assert!((entropy(&three).unwrap() - 1.039721).abs() < 1e-6);
        assert!(entropy(&DMatrix::from_row_slice(1, 2, &[0.5, 0.4])).is_err());
        assert!(entropy(&DMatrix::from_row_slice(1, 2, &[1.5, -0.5])).is_err());
    }

    #[test]
    fn identical_frames_sit_at_the_window_floor() {
        // H(T | I) under perfect dependence is the entropy the window itself
        // spreads over the bins, not zero
        let t = textured(16, 16, 5);
        let seq = Sequence::new(vec![t.clone(); 3], None).unwrap();
        let v = cte(&seq, &t, &HistogramConfig::default()).unwrap();
        let floor = oracle_conditional(t.data(), t.data(), 32, 1.0);
        assert!((v - floor).abs() < 1e-10, "{v} vs {floor}");
        assert!(v > 1.0 && v < 2.0);
        let noise = Image::from_fn(16, 16, |x, y| ((x * 7 + y * 13) % 17) as f64 / 16.0);
        let independent = cte(&Sequence::new(vec![noise; 2], None).unwrap(), &t, &HistogramConfig::default()).unwrap();
        assert!(v < independent);
    }

    #[test]
    fn independent_template_gives_marginal_entropy() {
        let t = Image::from_fn(8, 8, |x, _| if x % 2 == 0 { 0.25 } else { 0.75f64 });
        let f = Image::from_fn(8, 8, |_, y| if y % 2 == 0 { 0.25 } else { 0.75f64 });
        let seq = Sequence::new(vec![f.clone(), f.clone()], None).unwrap();
        let v = cte(&seq, &t, &HistogramConfig::default()).unwrap();
        // brute-force marginal entropy of the template
        let mut m = vec![0.0; 32];
        for &tv in t.data() {
            for (i, mi) in m.iter_mut().enumerate() {
                *mi += oracle_window(i as f64 - tv * 31.0, 1.0);
            }
        }
        let z: f64 = m.iter().sum();
        let ht = oracle_entropy(&m.iter().map(|v| v / z).collect::<Vec<_>>());
        assert!((v - ht).abs() < 0.02, "{v} vs {ht}");
    }

    #[test]
    fn half_aligned_set_lies_between() {
        let t = textured(16, 16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut shuffled = t.data().to_vec();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let s = Image::new(16, 16, shuffled).unwrap();
        let cfg = HistogramConfig::default();
        let aligned = cte(&Sequence::new(vec![t.clone(), t.clone()], None).unwrap(), &t, &cfg).unwrap();
        let mixed = cte(&Sequence::new(vec![t.clone(), s.clone()], None).unwrap(), &t, &cfg).unwrap();
        let apart = cte(&Sequence::new(vec![s.clone(), s], None).unwrap(), &t, &cfg).unwrap();
        assert!(aligned < mixed && mixed < apart);
        let expect = 0.5 * (aligned + apart);
        assert!((mixed - expect).abs() < 1e-12);
    }

    #[test]
    fn cte_decreases_along_shift_path() {
        let t = textured(32, 32, 11);
        let cfg = HistogramConfig::default();
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let d = 3.0 * (10 - step) as f64 / 10.0;
            let f = warp_image(&t, &DisplacementField::constant(32, 32, d, 0.6 * d)).unwrap();
            let v = cte(&Sequence::new(vec![f.clone(), f], None).unwrap(), &t, &cfg).unwrap();
            assert!(v < last, "step {step}: {v} >= {last}");
            last = v;
        }
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness(&TransformSet::<f64>::zeros(2, 5, 5)), 0.0);
        let c = TransformSet::new(vec![DisplacementField::constant(5, 5, 1.5f64, -2.0); 3]).unwrap();
        assert_eq!(smoothness(&c), 0.0);
        let lin = TransformSet::new(vec![DisplacementField::from_fn(5, 7, |x, _| (x as f64, 0.0))]).unwrap();
        // stencil oracle: forward differences in both directions of both components
        let mut s = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                let u = |xx: usize, yy: usize| lin.field(0).at(xx, yy);
                if x + 1 < 7 {
                    s += (u(x + 1, y).0 - u(x, y).0).powi(2) + (u(x + 1, y).1 - u(x, y).1).powi(2);
                }
                if y + 1 < 5 {
                    s += (u(x, y + 1).0 - u(x, y).0).powi(2) + (u(x, y + 1).1 - u(x, y).1).powi(2);
                }
            }
        }
        let expect = s / (5.0 * 7.0 * 2.0);
        assert!((smoothness(&lin) - expect).abs() < 1e-15);
        assert!((expect - 30.0 / 70.0).abs() < 1e-15);
    }

    #[test]
    fn cyclic_examples() {
        let a = DisplacementField::from_fn(4, 4, |x, y| (x as f64 * 0.3, y as f64 - 1.0));
        let b = a.scaled(-1.0);
        assert_eq!(cyclic(&TransformSet::new(vec![a.clone(), b]).unwrap()), 0.0);
        let d = 1.7;
        let shift = TransformSet::new(vec![DisplacementField::constant(4, 4, d, 0.0f64); 3]).unwrap();
        assert!((cyclic(&shift) - d * d).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fields: Vec<_> = (0..3)
            .map(|_| DisplacementField::from_fn(3, 5, |_, _| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
            .collect();
        let t = TransformSet::new(fields).unwrap();
        let mut o = 0.0;
        for y in 0..3 {
            for x in 0..5 {
                let (mut mx, mut my) = (0.0, 0.0);
                for f in t.fields() {
                    mx += f.at(x, y).0 / 3.0;
                    my += f.at(x, y).1 / 3.0;
                }
                o += mx * mx + my * my;
            }
        }
        assert!((cyclic(&t) - o / 15.0).abs() < 1e-14);
    }

    fn random_case(
        l: usize,
        seed: u64,
        with_features: bool,
    ) -> (Vec<Image<f64>>, Option<Vec<FeatureMap<f64>>>, TransformSet<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<_> = (0..l).map(|i| textured(8, 8, seed * 31 + i as u64)).collect();
        let feats = with_features.then(|| {
            frames
                .iter()
                .map(|f| extract_features(f, &FeatureExtractorSpec::default()).unwrap())
                .collect()
        });
        // integer part plus a fraction in [0.1, 0.9] keeps samples off cell edges
        let comp = |rng: &mut ChaCha8Rng| {
            let int = rng.gen_range(-1i32..=0) as f64;
            int + rng.gen_range(0.1..0.9)
        };
        let fields = (0..l)
            .map(|_| DisplacementField::from_fn(8, 8, |_, _| (comp(&mut rng), comp(&mut rng))))
            .collect();
        (frames, feats, TransformSet::new(fields).unwrap())
    }

    fn off_grid(f: &TransformSet<f64>, eps: f64) -> bool {
        f.fields().iter().all(|u| {
            u.dx().iter().chain(u.dy()).all(|v| {
                let fr = v - v.floor();
                fr > eps && fr < 1.0 - eps
            })
        })
    }

    /// Central differences of the fixed-weight objective, step 1e-3.
    fn gradient_error(l: usize, seed: u64, with_features: bool) -> f64 {
        let (frames, feats, fields) = random_case(l, seed, with_features);
        assert!(off_grid(&fields, 0.05));
        let inputs = LossInputs::new(&frames, feats.as_deref());
        let lw = LossWeights::default();
        let cfg = HistogramConfig::default();
        let base = total_loss(&inputs, &fields, Aggregation::Correlation, &lw, &cfg).unwrap();
        let fixed = TemplateWeights::Fixed {
            image: &base.image_weights,
            feature: base.feature_weights.as_ref(),
        };
        let value = |t: &TransformSet<f64>| evaluate(&inputs, t, fixed.clone(), &lw, &cfg).unwrap().total;
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for j in 0..l {
            for i in 0..64 {
                for comp in 0..2 {
                    let mut plus = fields.clone();
                    let mut minus = fields.clone();
                    let bump = |t: &mut TransformSet<f64>, d: f64| {
                        let f = &mut t.fields_mut()[j];
                        let p = if comp == 0 { f.dx_mut() } else { f.dy_mut() };
                        p[i] += d;
                    };
                    bump(&mut plus, h);
                    bump(&mut minus, -h);
                    let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                    let g = base.grad.field(j);
                    let an = if comp == 0 { g.dx()[i] } else { g.dy()[i] };
                    let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    worst = worst.max(err);
                }
            }
        }
        worst
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for (l, seed) in [(2, 1), (3, 2), (4, 3)] {
            let e = gradient_error(l, seed, false);
            assert!(e < 1e-3, "L={l}: {e}");
            let e = gradient_error(l, seed + 10, true);
            assert!(e < 1e-3, "L={l} with features: {e}");
        }
    }

    #[test]
    fn coarse_feature_grid_gradient_matches_finite_differences() {
        let (frames, _, fields) = random_case(3, 5, false);
        let spec = FeatureExtractorSpec { scale: 2, ..Default::default() };
        let feats: Vec<_> = frames.iter().map(|f| extract_features(f, &spec).unwrap()).collect();
        let inputs = LossInputs::new(&frames, Some(&feats));
        let lw = LossWeights { lambda_f: 1.0, lambda_s: 0.0, lambda_c: 0.0 };
        let cfg = HistogramConfig::default();
        let base = total_loss(&inputs, &fields, Aggregation::Mean, &lw, &cfg).unwrap();
        let value = |t: &TransformSet<f64>| total_loss(&inputs, t, Aggregation::Mean, &lw, &cfg).unwrap().total;
        // coarse positions may land on cell edges, so compare the aggregate
        let h = 1e-4;
        let (mut dot_a, mut dot_f) = (0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dir: Vec<Vec<f64>> = (0..3).map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut plus = fields.clone();
        let mut minus = fields.clone();
        for j in 0..3 {
            for i in 0..64 {
                plus.fields_mut()[j].dx_mut()[i] += h * dir[j][i];
                minus.fields_mut()[j].dx_mut()[i] -= h * dir[j][i];
                dot_a += base.grad.field(j).dx()[i] * dir[j][i];
            }
        }
        dot_f += (value(&plus) - value(&minus)) / (2.0 * h);
        assert!((dot_a - dot_f).abs() / dot_f.abs().max(1e-6) < 1e-2, "{dot_a} vs {dot_f}");
    }

    #[test]
    fn breakdown_decomposes_and_regularizers_are_linear() {
        let (frames, feats, fields) = random_case(3, 4, true);
        let inputs = LossInputs::new(&frames, feats.as_deref());
        let cfg = HistogramConfig::default();
        let lw = LossWeights::default();
        let b = total_loss(&inputs, &fields, Aggregation::Correlation, &lw, &cfg).unwrap();
        let sum = b.cte_image + 0.5 * b.cte_feature + 10.0 * b.smooth + 0.05 * b.cyclic;
        assert!((b.total - sum).abs() < 1e-6);
        assert!((b.smooth - smoothness(&fields)).abs() < 1e-15);
        assert!((b.cyclic - cyclic(&fields)).abs() < 1e-15);
        assert!(b.feature_weights.is_some());
    }

    #[test]
    fn aligned_identical_frames_have_zero_regularizers() {
        let t = textured(8, 8, 9);
        let frames = vec![t.clone(); 3];
        let inputs = LossInputs::new(&frames, None);
        let zero = TransformSet::zeros(3, 8, 8);
        let b = total_loss(&inputs, &zero, Aggregation::Correlation, &LossWeights::default(), &HistogramConfig::default())
            .unwrap();
        assert_eq!(b.smooth, 0.0);
        assert_eq!(b.cyclic, 0.0);
        let floor = oracle_conditional(t.data(), t.data(), 32, 1.0);
        assert!((b.cte_image - floor).abs() < 1e-10);
        assert!(b.image_weights.is_uniform(1e-12));
    }

    #[test]
    fn inputs_are_validated() {
        let t = textured(8, 8, 9);
        let frames = vec![t.clone(); 2];
        let inputs = LossInputs::new(&frames, None);
        let cfg = HistogramConfig::default();
        let lw = LossWeights::default();
        assert!(total_loss(&inputs, &TransformSet::zeros(3, 8, 8), Aggregation::Mean, &lw, &cfg).is_err());
        assert!(total_loss(&inputs, &TransformSet::zeros(2, 4, 8), Aggregation::Mean, &lw, &cfg).is_err());
        let bad = vec![t.map(|v| v * 2.0), t];
        assert!(total_loss(&LossInputs::new(&bad, None), &TransformSet::zeros(2, 8, 8), Aggregation::Mean, &lw, &cfg).is_err());
        let neg = LossWeights { lambda_s: -1.0, ..lw };
        assert!(total_loss(&inputs, &TransformSet::zeros(2, 8, 8), Aggregation::Mean, &neg, &cfg).is_err());
        assert!(HistogramConfig { bins: 4, kernel_sigma: 1.0 }.validate().is_err());
        assert!(HistogramConfig { bins: 32, kernel_sigma: 0.0 }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn total_loss_is_permutation_invariant(l in 2usize..=5, seed in 0u64..1000) {
            let (frames, feats, fields) = random_case(l, seed, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let p = Permutation::random(l, &mut rng);
            let pf = p.apply(&frames).unwrap();
            let pfe = p.apply(feats.as_ref().unwrap()).unwrap();
            let pt = permute_transforms(&fields, &p).unwrap();
            let cfg = HistogramConfig::default();
            let lw = LossWeights::default();
            let a = total_loss(&LossInputs::new(&frames, feats.as_deref()), &fields, Aggregation::Correlation, &lw, &cfg).unwrap();
            let b = total_loss(&LossInputs::new(&pf, Some(&pfe)), &pt, Aggregation::Correlation, &lw, &cfg).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-6);
            let ga = permute_transforms(&a.grad, &p).unwrap();
            prop_assert!(ga.max_abs_diff(&b.grad) < 1e-6);
        }
    }
}
