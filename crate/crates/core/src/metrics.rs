//! Registration and mapping quality: Dice overlap, landmark error, Jacobian
//! regularity, R² survival and dense endpoint error against known motion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::setagg::AggregationWeights;
use crate::types::{Image, LabelMask, Landmark, LandmarkSet, TransformSet};
use crate::warp::{invert_point, jacobian_det, Sampler};

const LANDMARK_INVERSION_ITERS: usize = 50;

/// `2|A∩B| / (|A|+|B|)` for one label; 1 when the label is absent from both.
pub fn dice(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "dice: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, sd: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, sd: var.sqrt() }
    }
}

/// Dice over all `L(L-1)/2` unordered mask pairs.
pub fn all_pair_dice(masks: &[LabelMask], label: u8) -> Result<MeanSd> {
    if masks.len() < 2 {
        return Err(Error::TooFewFrames {
            min: 2,
            actual: masks.len(),
        });
    }
    let mut values = Vec::with_capacity(masks.len() * (masks.len() - 1) / 2);
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            values.push(dice(&masks[i], &masks[j], label)?);
        }
    }
    Ok(MeanSd::of(&values))
}

/// Per-pixel most frequent label across frames; ties go to the smaller label.
pub fn majority_mask(masks: &[LabelMask]) -> Result<LabelMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("majority vote of zero masks".into()))?;
    let (h, w) = first.dims();
    if let Some(m) = masks.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::ShapeMismatch(format!(
            "majority_mask: {:?} vs {:?}",
            m.dims(),
            (h, w)
        )));
    }
    let mut out = vec![0u8; h * w];
    let mut counts = [0u32; 256];
    for (p, o) in out.iter_mut().enumerate() {
        counts.iter_mut().for_each(|c| *c = 0);
        for m in masks {
            counts[m.labels()[p] as usize] += 1;
        }
        let mut best = 0usize;
        for (label, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = label;
            }
        }
        *o = best as u8;
    }
    LabelMask::new(h, w, out)
}

/// Moves each frame's landmarks into the registered (template) space.
///
/// The registered frame at `x` samples the raw frame at `x + u(x)`, so a raw
/// landmark `y` appears where `x + u(x) = y`.
pub fn map_landmarks<T: Real>(landmarks: &LandmarkSet, transforms: &TransformSet<T>) -> Result<LandmarkSet> {
    let points = landmarks
        .points
        .iter()
        .map(|p| {
            let field = transforms.fields().get(p.frame).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "landmark frame {} has no transform ({} fields)",
                    p.frame,
                    transforms.len()
                ))
            })?;
            let (x, y) = invert_point(field, (p.x, p.y), LANDMARK_INVERSION_ITERS);
            Ok(Landmark { frame: p.frame, x, y })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandmarkSet::new(points))
}

fn grouped(landmarks: &LandmarkSet) -> Result<Vec<Vec<(f64, f64)>>> {
    let frames = landmarks.frame_count();
    let groups = landmarks.by_frame(frames);
    let k = groups.first().map_or(0, Vec::len);
    for (i, g) in groups.iter().enumerate() {
        if g.len() != k {
            return Err(Error::InvalidArgument(format!(
                "frame {i} has {} landmarks, frame 0 has {k}",
                g.len()
            )));
        }
    }
    Ok(groups)
}

/// Per-landmark reference position: the weighted mean over frames, with
/// uniform weights when none are given.
pub fn landmark_reference(mapped: &LandmarkSet, weights: Option<&AggregationWeights>) -> Result<Vec<(f64, f64)>> {
    let groups = grouped(mapped)?;
    let uniform;
    let w = match weights {
        Some(w) => w,
        None => {
            uniform = AggregationWeights::uniform(groups.len().max(1));
            &uniform
        }
    };
    if w.len() != groups.len() {
        return Err(Error::LengthMismatch {
            expected: groups.len(),
            actual: w.len(),
        });
    }
    let k = groups.first().map_or(0, Vec::len);
    Ok((0..k)
        .map(|j| {
            groups.iter().zip(w.as_slice()).fold((0.0, 0.0), |(sx, sy), (g, wi)| {
                (sx + wi * g[j].0, sy + wi * g[j].1)
            })
        })
        .collect())
}

/// Mean Euclidean distance from every mapped landmark to its reference.
pub fn tre(mapped: &LandmarkSet, reference: &[(f64, f64)]) -> Result<f64> {
    let groups = grouped(mapped)?;
    let k = groups.first().map_or(0, Vec::len);
    if k != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: k,
        });
    }
    let n = groups.len() * k;
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = groups
        .iter()
        .flat_map(|g| g.iter().zip(reference))
        .map(|(p, r)| (p.0 - r.0).hypot(p.1 - r.1))
        .sum();
    Ok(total / n as f64)
}

/// Standard deviation of `log det J` over interior pixels of every frame.
/// Pixels with `det J <= 0` are left out; they are counted by
/// [`folding_ratio`].
pub fn log_det_j_std<T: Real>(t: &TransformSet<T>) -> f64 {
    let mut logs = Vec::new();
    for f in t.fields() {
        let (h, w) = f.dims();
        let det = jacobian_det(f);
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let d = det.get(x, y).f64();
                if d > 0.0 {
                    logs.push(d.ln());
                }
            }
        }
    }
    MeanSd::of(&logs).sd
}

/// Fraction of pixels, over all frames, with `det J <= 0`.
pub fn folding_ratio<T: Real>(t: &TransformSet<T>) -> f64 {
    let (mut folded, mut total) = (0usize, 0usize);
    for f in t.fields() {
        let det = jacobian_det(f);
        folded += det.data().iter().filter(|d| d.f64() <= 0.0).count();
        total += det.data().len();
    }
    if total == 0 {
        0.0
    } else {
        folded as f64 / total as f64
    }
}

/// Fraction of selected pixels whose R² reaches each threshold. An empty
/// selection yields zeros.
pub fn r2_survival(r2: &Image<f64>, mask: Option<&[bool]>, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if thresholds.windows(2).any(|p| !(p[0] <= p[1])) {
        return Err(Error::InvalidArgument("thresholds must be sorted ascending".into()));
    }
    if let Some(m) = mask {
        if m.len() != r2.data().len() {
            return Err(Error::LengthMismatch {
                expected: r2.data().len(),
                actual: m.len(),
            });
        }
    }
    let mut values: Vec<f64> = r2
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.map_or(true, |m| m[*i]))
        .map(|(_, v)| *v)
        .collect();
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Ok(thresholds
        .iter()
        .map(|&t| {
            if n == 0 {
                return (t, 0.0);
            }
            let below = values.partition_point(|v| *v < t);
            (t, (n - below) as f64 / n as f64)
        })
        .collect())
}

/// Dense endpoint error against known motion.
///
/// Frame `i` samples the canonical anatomy at `y + g_i(y)`, and registration
/// samples frame `i` at `x + u_i(x)`, so the canonical point behind template
/// pixel `x` is `c_i(x) = x + u_i(x) + g_i(x + u_i(x))`. Perfect alignment
/// makes `c_i` agree across frames; the error is the mean distance of `c_i`
/// from its frame average. With zero transforms it measures the raw
/// misalignment. A common motion of all frames costs nothing.
pub fn endpoint_error<T: Real, U: Real>(
    estimated: &TransformSet<T>,
    ground_truth: &TransformSet<U>,
    region: Option<&[bool]>,
) -> Result<f64> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::LengthMismatch {
            expected: ground_truth.len(),
            actual: estimated.len(),
        });
    }
    let (h, w) = ground_truth
        .dims()
        .ok_or_else(|| Error::InvalidArgument("empty transform set".into()))?;
    if estimated.dims() != Some((h, w)) {
        return Err(Error::ShapeMismatch(format!(
            "estimated {:?} vs ground truth {:?}",
            estimated.dims(),
            (h, w)
        )));
    }
    if let Some(r) = region {
        if r.len() != h * w {
            return Err(Error::LengthMismatch {
                expected: h * w,
                actual: r.len(),
            });
        }
    }
    let l = estimated.len();
    let n = h * w;
    let mut cx = vec![vec![0.0f64; n]; l];
    let mut cy = vec![vec![0.0f64; n]; l];
    for i in 0..l {
        let u = estimated.field(i);
        let g = ground_truth.field(i);
        let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for p in 0..n {
            xs.push(U::of((p % w) as f64 + u.dx()[p].f64()));
            ys.push(U::of((p / w) as f64 + u.dy()[p].f64()));
        }
        let s = Sampler::new(h, w, &xs, &ys);
        let (gx, gy) = (s.sample(g.dx()), s.sample(g.dy()));
        for p in 0..n {
            cx[i][p] = xs[p].f64() + gx[p].f64();
            cy[i][p] = ys[p].f64() + gy[p].f64();
        }
    }
    let (mut total, mut count) = (0.0, 0usize);
    for p in 0..n {
        if region.map_or(false, |r| !r[p]) {
            continue;
        }
        let mx = cx.iter().map(|c| c[p]).sum::<f64>() / l as f64;
        let my = cy.iter().map(|c| c[p]).sum::<f64>() / l as f64;
        for i in 0..l {
            total += (cx[i][p] - mx).hypot(cy[i][p] - my);
        }
        count += l;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
