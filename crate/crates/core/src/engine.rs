//! Groupwise registration by multi-scale instance optimization.
//!
//! Each scale optimizes one dense incremental field per frame. The fields of
//! coarser scales are upsampled and composed underneath, so at scale `k` the
//! total transform of frame `i` is `v_i^(k) ∘ ↑C_i^(k+1) ∘ ↓B_i`, where `B`
//! is the optional warm start. Frames are min-max normalized once, pooled
//! into an average pyramid, and warped against correlation-weighted (or
//! mean) templates on every iteration.
//!
//! Every stage treats frames independently apart from the set aggregation,
//! so permuting the input permutes the output.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{ensure_same_grid, Error, Result};
use crate::features::{extract_features, FeatureExtractorSpec};
use crate::loss::{evaluate, HistogramConfig, LossBreakdown, LossInputs, LossTerms, LossWeights, TemplateWeights};
use crate::real::Real;
use crate::setagg::{Aggregation, AggregationWeights};
use crate::types::{normalize_intensity, DisplacementField, FeatureMap, Image, Sequence, TransformSet};
use crate::warp::{compose, compose_with, downsample_field, downsample_image, upsample_field, Sampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Pyramid levels `K`; level `k` has grid factor `2^(k-1)`.
    pub scales: usize,
    /// Iterations per level, coarsest first.
    pub iters_per_scale: Vec<usize>,
    /// Initial step in pixels of the level being optimized.
    pub step_size: f64,
    /// The step follows a cosine schedule within each level down to
    /// `step_size * final_step_fraction`.
    pub final_step_fraction: f64,
    /// Iterations over which the step ramps up linearly at the start of each
    /// level; 0 disables.
    pub warmup_iters: usize,
    pub loss_weights: LossWeights,
    pub hist: HistogramConfig,
    pub feature_spec: FeatureExtractorSpec,
    pub aggregation: Aggregation,
    pub precision: Precision,
    /// Recorded for reproducibility; the optimizer itself is deterministic.
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            scales: 4,
            iters_per_scale: vec![100, 100, 100, 50],
            step_size: 0.5,
            final_step_fraction: 0.1,
            warmup_iters: 10,
            loss_weights: LossWeights::default(),
            hist: HistogramConfig::default(),
            feature_spec: FeatureExtractorSpec::default(),
            aggregation: Aggregation::Correlation,
            precision: Precision::Single,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Finest-level refinement only, for warm starts.
    pub fn refinement(&self, steps: usize) -> Self {
        Self {
            scales: 1,
            iters_per_scale: vec![steps],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::InvalidArgument("scales must be >= 1".into()));
        }
        if self.iters_per_scale.len() != self.scales {
            return Err(Error::InvalidArgument(format!(
                "{} iteration counts for {} scales",
                self.iters_per_scale.len(),
                self.scales
            )));
        }
        if self.iters_per_scale.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("iteration counts must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument("step_size must be positive".into()));
        }
        if !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return Err(Error::InvalidArgument("final_step_fraction must be in (0, 1]".into()));
        }
        self.loss_weights.validate()?;
        self.hist.validate()?;
        if self.feature_spec.enabled() {
            self.feature_spec.validate()?;
        }
        Ok(())
    }

    fn features_on(&self) -> bool {
        self.feature_spec.enabled() && self.loss_weights.lambda_f > 0.0
    }

    fn step_at(&self, iteration: usize, total: usize) -> f64 {
        let warm = if self.warmup_iters == 0 {
            1.0
        } else {
            ((iteration + 1) as f64 / self.warmup_iters as f64).min(1.0)
        };
        if total <= 1 {
            return warm * self.step_size;
        }
        let progress = iteration as f64 / (total - 1) as f64;
        let f = self.final_step_fraction;
        warm * self.step_size * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Loss terms at one optimizer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Pyramid level, 1 = finest.
    pub scale: usize,
    pub iteration: usize,
    pub step: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult<T = f32> {
    pub transforms: TransformSet<T>,
    /// Terms before every update, all levels in order.
    pub loss_history: Vec<LossRecord>,
    /// Image-template weights of the last iteration.
    pub weights_history: AggregationWeights,
    pub feature_weights: Option<AggregationWeights>,
    /// Wall time per level, coarsest first.
    pub wall_time_ms: Vec<f64>,
    /// Time spent in aggregation across all iterations.
    pub aggregation_time_ms: f64,
    /// Loss of the starting transforms at the finest grid.
    pub initial_loss: LossTerms,
    /// Loss of the returned transforms at the finest grid.
    pub final_loss: LossTerms,
    /// Number of times the step was halved after a non-finite loss.
    pub step_halvings: usize,
}

impl<T> RegistrationResult<T> {
    pub fn total_time_ms(&self) -> f64 {
        self.wall_time_ms.iter().sum()
    }

    /// Fraction of optimization time spent building templates.
    pub fn aggregation_share(&self) -> f64 {
        let t = self.total_time_ms();
        if t > 0.0 {
            self.aggregation_time_ms / t
        } else {
            0.0
        }
    }
}

fn check_grid(dims: (usize, usize), scales: usize) -> Result<()> {
    let f = 1usize << (scales - 1);
    if dims.0 % f != 0 || dims.1 % f != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} grid is not divisible by 2^{} for {} scales",
            dims.0,
            dims.1,
            scales - 1,
            scales
        )));
    }
    Ok(())
}

fn normalized_frames<U: Real, T: Real>(seq: &Sequence<T>) -> Result<Vec<Image<U>>> {
    seq.frames()
        .iter()
        .map(|f| normalize_intensity(&f.cast::<U>()))
        .collect()
}

fn level_features<U: Real>(frames: &[Image<U>], spec: &FeatureExtractorSpec) -> Result<Vec<FeatureMap<U>>> {
    frames.par_iter().map(|f| extract_features(f, spec)).collect()
}

/// Zero-based registration.
pub fn register<T: Real>(seq: &Sequence<T>, cfg: &OptimConfig) -> Result<RegistrationResult<T>> {
    dispatch(seq, cfg, None)
}

/// Registration starting from `init` on the finest grid.
pub fn register_with_init<T: Real>(
    seq: &Sequence<T>,
    cfg: &OptimConfig,
    init: &TransformSet<T>,
) -> Result<RegistrationResult<T>> {
    if init.len() != seq.len() {
        return Err(Error::LengthMismatch {
            expected: seq.len(),
            actual: init.len(),
        });
    }
    ensure_same_grid("register_with_init", seq.dims(), init.dims().unwrap_or((0, 0)))?;
    dispatch(seq, cfg, Some(init))
}

/// Independent registrations; the output order matches the input.
pub fn register_batch<T: Real>(seqs: &[Sequence<T>], cfg: &OptimConfig) -> Vec<Result<RegistrationResult<T>>> {
    seqs.par_iter().map(|s| register(s, cfg)).collect()
}

/// Total loss of `transforms` at the finest grid under `cfg`.
pub fn evaluate_loss<T: Real>(
    seq: &Sequence<T>,
    cfg: &OptimConfig,
    transforms: &TransformSet<T>,
) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    if transforms.len() != seq.len() {
        return Err(Error::LengthMismatch {
            expected: seq.len(),
            actual: transforms.len(),
        });
    }
    let frames: Vec<Image<T>> = normalized_frames(seq)?;
    let feats = if cfg.features_on() {
        Some(level_features(&frames, &cfg.feature_spec)?)
    } else {
        None
    };
    let inputs = LossInputs::new(&frames, feats.as_deref());
    evaluate(
        &inputs,
        transforms,
        TemplateWeights::Compute(cfg.aggregation),
        &cfg.loss_weights,
        &cfg.hist,
    )
}

fn dispatch<T: Real>(
    seq: &Sequence<T>,
    cfg: &OptimConfig,
    init: Option<&TransformSet<T>>,
) -> Result<RegistrationResult<T>> {
    match cfg.precision {
        Precision::Single => run::<f32, T>(seq, cfg, init),
        Precision::Double => run::<f64, T>(seq, cfg, init),
    }
}

fn run<U: Real, T: Real>(
    seq: &Sequence<T>,
    cfg: &OptimConfig,
    init: Option<&TransformSet<T>>,
) -> Result<RegistrationResult<T>> {
    cfg.validate()?;
    let (h, w) = seq.dims();
    check_grid((h, w), cfg.scales)?;
    let l = seq.len();
    let frames: Vec<Image<U>> = normalized_frames(seq)?;
    let init: Option<TransformSet<U>> = init.map(|t| t.cast());

    let mut history = Vec::new();
    let mut wall = Vec::with_capacity(cfg.scales);
    let mut agg_ms = 0.0;
    let mut halvings = 0;
    let mut last_weights = AggregationWeights::uniform(l);
    let mut last_feature_weights = None;
    // accumulated transforms of the levels done so far, on the last level's grid
    let mut coarse: Option<TransformSet<U>> = None;

    for (li, level) in (1..=cfg.scales).rev().enumerate() {
        let clock = Instant::now();
        let factor = 1usize << (level - 1);
        let (lh, lw) = (h / factor, w / factor);
        let lframes: Vec<Image<U>> = frames.iter().map(|f| downsample_image(f, factor)).collect();
        let lfeats = if cfg.features_on() {
            Some(level_features(&lframes, &cfg.feature_spec)?)
        } else {
            None
        };
        let inputs = LossInputs::new(&lframes, lfeats.as_deref());

        // transform underneath this level's increments
        let below: Option<Vec<DisplacementField<U>>> = match (&coarse, &init) {
            (None, None) => None,
            (c, b) => {
                let up: Vec<DisplacementField<U>> = match c {
                    Some(c) => c.fields().iter().map(|f| upsample_field(f, 2)).collect(),
                    None => vec![DisplacementField::zeros(lh, lw); l],
                };
                Some(match b {
                    Some(b) => up
                        .iter()
                        .zip(b.fields())
                        .map(|(u, bf)| compose(u, &downsample_field(bf, factor)))
                        .collect::<Result<Vec<_>>>()?,
                    None => up,
                })
            }
        };
        let below_samplers: Option<Vec<Sampler<U>>> =
            below.as_ref().map(|b| b.par_iter().map(Sampler::from_field).collect());

        let total_of = |incr: &TransformSet<U>| -> TransformSet<U> {
            match (&below, &below_samplers) {
                (Some(b), Some(s)) => TransformSet::new(
                    incr.fields()
                        .iter()
                        .zip(b.iter().zip(s))
                        .map(|(v, (bf, sm))| compose_with(sm, v, bf))
                        .collect(),
                )
                .expect("fields share one grid"),
                _ => incr.clone(),
            }
        };

        let iters = cfg.iters_per_scale[li];
        let mut incr = TransformSet::<U>::zeros(l, lh, lw);
        let mut adam = Adam::new(l * 2 * lh * lw);
        let mut scale_step = 1.0;
        let mut it = 0;
        while it < iters {
            let total = total_of(&incr);
            let outcome = evaluate(
                &inputs,
                &total,
                TemplateWeights::Compute(cfg.aggregation),
                &cfg.loss_weights,
                &cfg.hist,
            );
            let b = match outcome {
                Ok(b) => b,
                Err(Error::NonFinite(what)) => {
                    if halvings > 0 {
                        return Err(Error::Diverged(format!(
                            "non-finite {what} at level {level}, iteration {it}, after halving the step"
                        )));
                    }
                    halvings += 1;
                    scale_step *= 0.5;
                    incr = TransformSet::zeros(l, lh, lw);
                    adam = Adam::new(l * 2 * lh * lw);
                    it = 0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let step = cfg.step_at(it, iters) * scale_step;
            history.push(LossRecord {
                scale: level,
                iteration: it,
                step,
                terms: b.terms(),
            });
            agg_ms += b.aggregation_time.as_secs_f64() * 1e3;
            last_weights = b.image_weights.clone();
            last_feature_weights = b.feature_weights.clone();

            // chain dL/d(total) back to the increments through the sampling at x + B(x)
            let grads: Vec<(Vec<U>, Vec<U>)> = match &below_samplers {
                Some(s) => b
                    .grad
                    .fields()
                    .par_iter()
                    .zip(s.par_iter())
                    .map(|(g, sm)| {
                        let mut gx = vec![U::zero(); lh * lw];
                        let mut gy = vec![U::zero(); lh * lw];
                        sm.scatter(g.dx(), &mut gx);
                        sm.scatter(g.dy(), &mut gy);
                        (gx, gy)
                    })
                    .collect(),
                None => b.grad.into_fields().into_iter().map(DisplacementField::into_planes).collect(),
            };
            adam.tick();
            let n = lh * lw;
            for (j, (field, (gx, gy))) in incr.fields_mut().iter_mut().zip(&grads).enumerate() {
                let (px, py) = field.planes_mut();
                adam.update(2 * j * n, px, gx, step);
                adam.update((2 * j + 1) * n, py, gy, step);
            }
            it += 1;
        }
        coarse = Some(match (&coarse, &below) {
            // increments composed onto the upsampled coarser result, warm start excluded
            (Some(c), _) => TransformSet::new(
                incr.fields()
                    .iter()
                    .zip(c.fields())
                    .map(|(v, cf)| compose(v, &upsample_field(cf, 2)))
                    .collect::<Result<Vec<_>>>()?,
            )?,
            (None, _) => incr,
        });
        wall.push(clock.elapsed().as_secs_f64() * 1e3);
    }

    let mut result = coarse.expect("at least one level");
    if let Some(b) = &init {
        result = TransformSet::new(
            result
                .fields()
                .iter()
                .zip(b.fields())
                .map(|(c, bf)| compose(c, bf))
                .collect::<Result<Vec<_>>>()?,
        )?;
    }

    let finest_feats = if cfg.features_on() {
        Some(level_features(&frames, &cfg.feature_spec)?)
    } else {
        None
    };
    let finest = LossInputs::new(&frames, finest_feats.as_deref());
    let start = init.clone().unwrap_or_else(|| TransformSet::zeros(l, h, w));
    let mode = TemplateWeights::Compute(cfg.aggregation);
    let initial_loss = evaluate(&finest, &start, mode.clone(), &cfg.loss_weights, &cfg.hist)?.terms();
    let final_loss = evaluate(&finest, &result, mode, &cfg.loss_weights, &cfg.hist)?.terms();

    Ok(RegistrationResult {
        transforms: result.cast(),
        loss_history: history,
        weights_history: last_weights,
        feature_weights: last_feature_weights,
        wall_time_ms: wall,
        aggregation_time_ms: agg_ms,
        initial_loss,
        final_loss,
        step_halvings: halvings,
    })
}
