//! Inversion-recovery signal model and voxel-wise least-squares fitting.
//!
//! `S(t) = A - B exp(-t / T1*)`, with the Look-Locker correction
//! `T1 = T1* (B / A - 1)`. Fits start from a grid search over
//! `T1* ∈ {100, 200, ..., 3000}` ms with linear least squares for `(A, B)`
//! and are refined by Levenberg-Marquardt. The T1 uncertainty is the delta
//! method applied to the linearized parameter covariance.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::types::{Image, LabelMask, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    #[default]
    T1ThreeParam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    pub kind: SignalKind,
    pub a: f64,
    pub b: f64,
    /// Apparent relaxation time, ms.
    pub t1_star: f64,
}

impl SignalModel {
    pub fn t1(a: f64, b: f64, t1_star: f64) -> Result<Self> {
        if !(t1_star > 0.0) || !(b >= 0.0) || !a.is_finite() || !b.is_finite() || !t1_star.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "signal model needs T1* > 0 and B >= 0, got A={a} B={b} T1*={t1_star}"
            )));
        }
        Ok(Self {
            kind: SignalKind::T1ThreeParam,
            a,
            b,
            t1_star,
        })
    }

    /// Time at which the signal crosses zero, when it does.
    pub fn null_time(&self) -> Option<f64> {
        (self.a > 0.0 && self.b > self.a).then(|| self.t1_star * (self.b / self.a).ln())
    }
}

pub fn model_eval(model: &SignalModel, t: f64) -> f64 {
    match model.kind {
        SignalKind::T1ThreeParam => model.a - model.b * (-t / model.t1_star).exp(),
    }
}

pub fn look_locker_correct(a: f64, b: f64, t1_star: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::InvalidArgument(format!("Look-Locker correction needs A > 0, got {a}")));
    }
    Ok(t1_star * (b / a - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when the relative decrease of the residual sum of squares, or
    /// the relative parameter step, falls below this.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelFit {
    pub model: SignalModel,
    /// Look-Locker corrected T1 in ms; zero when `A <= 0`.
    pub t1: f64,
    pub r2: f64,
    /// Delta-method standard deviation of T1 in ms; infinite when the
    /// covariance is singular.
    pub sd_t1: f64,
    pub converged: bool,
}

pub const GRID_T1_STAR: std::ops::RangeInclusive<u32> = 1..=30;

fn ssr(samples: &[(f64, f64)], a: f64, b: f64, t1s: f64) -> f64 {
    samples
        .iter()
        .map(|&(t, y)| {
            let r = y - (a - b * (-t / t1s).exp());
            r * r
        })
        .sum()
}

/// Linear least squares for `(A, B)` at fixed `T1*`.
fn linear_ab(samples: &[(f64, f64)], t1s: f64) -> Option<(f64, f64)> {
    let n = samples.len() as f64;
    let (mut se, mut see, mut sy, mut sey) = (0.0, 0.0, 0.0, 0.0);
    for &(t, y) in samples {
        let e = (-t / t1s).exp();
        se += e;
        see += e * e;
        sy += y;
        sey += e * y;
    }
    // y = A - B e: normal equations in (A, -B)
    let det = n * see - se * se;
    if det.abs() < 1e-300 {
        return None;
    }
    let a = (see * sy - se * sey) / det;
    let nb = (n * sey - se * sy) / det;
    Some((a, -nb))
}

/// Best `(A, B, T1*)` over the coarse `T1*` grid.
pub fn grid_search(samples: &[(f64, f64)]) -> Option<(f64, f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for k in GRID_T1_STAR {
        let t1s = 100.0 * k as f64;
        if let Some((a, b)) = linear_ab(samples, t1s) {
            let s = ssr(samples, a, b, t1s);
            if best.map_or(true, |bst| s < bst.3) {
                best = Some((a, b, t1s, s));
            }
        }
    }
    best
}

fn jacobian_row(t: f64, b: f64, t1s: f64) -> Vector3<f64> {
    let e = (-t / t1s).exp();
    Vector3::new(1.0, -e, -b * e * t / (t1s * t1s))
}

fn normal_equations(samples: &[(f64, f64)], p: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for &(t, y) in samples {
        let j = jacobian_row(t, p[1], p[2]);
        let r = y - (p[0] - p[1] * (-t / p[2]).exp());
        jtj += j * j.transpose();
        jtr += j * r;
    }
    (jtj, jtr)
}

fn r_squared(samples: &[(f64, f64)], ss_res: f64) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let ss_tot: f64 = samples.iter().map(|s| (s.1 - mean).powi(2)).sum();
    if ss_tot < 1e-12 {
        // flat data: perfect only when the fit is also exact
        return if ss_res < 1e-12 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Fits the three-parameter model to `(t_ms, value)` samples.
pub fn fit_voxel(samples: &[(f64, f64)], opts: &FitOptions) -> Result<VoxelFit> {
    if samples.len() < 4 {
        return Err(Error::InvalidArgument(format!("need >= 4 samples, got {}", samples.len())));
    }
    if samples.iter().any(|(t, y)| !t.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("fit samples".into()));
    }
    let mut ts: Vec<f64> = samples.iter().map(|s| s.0).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    if ts.len() < 3 || ts[0] < 0.0 {
        return Err(Error::InvalidArgument("need >= 3 distinct nonnegative sample times".into()));
    }

    let (a0, b0, t0, s0) = grid_search(samples).ok_or_else(|| Error::InvalidArgument("degenerate sample times".into()))?;
    let mut p = Vector3::new(a0, b0, t0);
    let mut cost = s0;
    let mut lambda = 1e-3;
    let mut converged = cost < 1e-30;
    for _ in 0..opts.max_iterations {
        if converged {
            break;
        }
        let (jtj, jtr) = normal_equations(samples, &p);
        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = jtj;
            for d in 0..3 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = p + step;
            if !(cand[2] > 0.0) || !cand.iter().all(|v| v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let c = ssr(samples, cand[0], cand[1], cand[2]);
            if c <= cost {
                let rel_step = (step.component_div(&p.map(|v| v.abs().max(1e-12)))).amax();
                let rel_cost = (cost - c) / cost.max(1e-300);
                p = cand;
                cost = c;
                lambda = (lambda * 0.1).max(1e-15);
                accepted = true;
                if rel_cost < opts.tolerance || rel_step < opts.tolerance || cost < 1e-30 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no decrease possible at any damping: a stationary point
            converged = true;
            break;
        }
    }
    if !converged || !(p[1] >= -1e-9) {
        let model = SignalModel::t1(a0, b0.max(0.0), t0)?;
        return Ok(finish(samples, model, s0, false));
    }
    let model = SignalModel {
        kind: SignalKind::T1ThreeParam,
        a: p[0],
        b: p[1].max(0.0),
        t1_star: p[2],
    };
    Ok(finish(samples, model, cost, true))
}

fn finish(samples: &[(f64, f64)], model: SignalModel, cost: f64, converged: bool) -> VoxelFit {
    let r2 = r_squared(samples, cost);
    let t1 = look_locker_correct(model.a, model.b, model.t1_star).unwrap_or(0.0);
    let dof = samples.len() as f64 - 3.0;
    let sigma2 = if dof > 0.0 { cost / dof } else { 0.0 };
    let sd_t1 = if sigma2 <= 0.0 {
        0.0
    } else {
        let (jtj, _) = normal_equations(samples, &Vector3::new(model.a, model.b, model.t1_star));
        match jtj.try_inverse() {
            Some(inv) if model.a > 0.0 => {
                let g = Vector3::new(
                    -model.t1_star * model.b / (model.a * model.a),
                    model.t1_star / model.a,
                    model.b / model.a - 1.0,
                );
                let var = sigma2 * (g.transpose() * inv * g)[(0, 0)];
                if var.is_finite() && var >= 0.0 {
                    var.sqrt()
                } else {
                    f64::INFINITY
                }
            }
            _ => f64::INFINITY,
        }
    };
    VoxelFit {
        model,
        t1,
        r2,
        sd_t1,
        converged,
    }
}

/// Per-pixel fit maps. Pixels outside the mask are zero and flagged as not
/// fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub a: Image<f64>,
    pub b: Image<f64>,
    pub t1_star: Image<f64>,
    pub t1: Image<f64>,
    pub r2: Image<f64>,
    /// Delta-method T1 standard deviation; non-finite values are stored as
    /// zero with `converged` false.
    pub sd_t1: Image<f64>,
    pub fitted: Vec<bool>,
    pub converged: Vec<bool>,
}

impl FitResult {
    /// R² of fitted pixels, optionally restricted to one label of a mask.
    pub fn r2_values(&self, mask: Option<(&LabelMask, u8)>) -> Vec<f64> {
        self.r2
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| self.fitted[*i] && mask.map_or(true, |(m, l)| m.labels()[*i] == l))
            .map(|(_, &v)| v)
            .collect()
    }

    pub fn median_r2(&self, mask: Option<(&LabelMask, u8)>) -> Option<f64> {
        median(&self.r2_values(mask))
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Fits every pixel with a nonzero mask label (all pixels without a mask).
pub fn fit_map<T: Real>(
    seq: &Sequence<T>,
    times_ms: &[f64],
    mask: Option<&LabelMask>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if times_ms.len() != seq.len() {
        return Err(Error::LengthMismatch {
            expected: seq.len(),
            actual: times_ms.len(),
        });
    }
    let (h, w) = seq.dims();
    if let Some(m) = mask {
        crate::error::ensure_same_grid("fit_map mask", (h, w), m.dims())?;
    }
    let n = h * w;
    let fits: Vec<Option<VoxelFit>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if mask.is_some_and(|m| m.labels()[i] == 0) {
                return Ok(None);
            }
            let samples: Vec<(f64, f64)> = times_ms
                .iter()
                .zip(seq.frames())
                .map(|(&t, f)| (t, f.data()[i].f64()))
                .collect();
            fit_voxel(&samples, opts).map(Some)
        })
        .collect::<Result<_>>()?;
    let pick = |f: &dyn Fn(&VoxelFit) -> f64| -> Image<f64> {
        Image::from_fn(h, w, |x, y| fits[y * w + x].as_ref().map_or(0.0, |v| {
            let r = f(v);
            if r.is_finite() { r } else { 0.0 }
        }))
    };
    Ok(FitResult {
        a: pick(&|v| v.model.a),
        b: pick(&|v| v.model.b),
        t1_star: pick(&|v| v.model.t1_star),
        t1: pick(&|v| v.t1),
        r2: pick(&|v| v.r2),
        sd_t1: pick(&|v| v.sd_t1),
        fitted: fits.iter().map(Option::is_some).collect(),
        converged: fits.iter().map(|f| f.is_some_and(|v| v.converged && v.sd_t1.is_finite())).collect(),
    })
}
