//! Command implementations. Each returns a typed summary so tests and the
//! benchmark harness can drive them without the binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use setreg::engine::{
    evaluate_loss, register, register_with_init, LossRecord, OptimConfig, Precision, RegistrationResult,
};
use setreg::features::FeatureExtractorSpec;
use setreg::loss::LossTerms;
use setreg::metrics::{
    all_pair_dice, endpoint_error, folding_ratio, landmark_reference, log_det_j_std, majority_mask,
    map_landmarks, r2_survival, tre, MeanSd,
};
use setreg::pipeline::{forward, init_params, PipelineSpec};
use setreg::qmap::{fit_map, FitOptions};
use setreg::setagg::{Aggregation, AggregationWeights};
use setreg::synth::{
    default_times, make_phantom, simulate_sequence, MotionKind, MotionModel, SimulatedCase, BAND, BLOOD,
    MYOCARDIUM,
};
use setreg::warp::{warp_all, warp_labels};
use setreg::{Image, LabelMask, Sequence, TransformSet};

use crate::args::{
    parse_size, AggArg, EvalArgs, FeaturesArg, FitArgs, InitArg, MotionArg, PrecisionArg, RegisterArgs, SynthArgs,
};
use crate::error::{CliError, CliResult};
use crate::io;

pub const FRAMES_FILE: &str = "frames.f32";
pub const TRUTH_FILE: &str = "truth.f32";
pub const MASKS_FILE: &str = "masks.u8";
pub const LANDMARKS_FILE: &str = "landmarks.csv";
pub const TIMES_FILE: &str = "times.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRANSFORMS_FILE: &str = "transforms.f32";
pub const WARPED_FILE: &str = "warped.f32";

/// R² thresholds of the survival table.
pub const SURVIVAL_THRESHOLDS: [f64; 10] = [0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.98, 0.99];

/// Display windows of the PNG exports: file, low, high, unit.
pub const PNG_WINDOWS: [(&str, f64, f64, &str); 3] = [
    ("t1.png", 0.0, 2500.0, "ms"),
    ("t1_star.png", 0.0, 2000.0, "ms"),
    ("r2.png", 0.0, 1.0, "1"),
];

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seeds for the phantom, motion and noise of one case.
pub fn case_seeds(seed: u64, case: usize) -> (u64, u64, u64) {
    let base = splitmix(seed ^ splitmix(case as u64));
    (splitmix(base), splitmix(base ^ 1), splitmix(base ^ 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub motion_max: f64,
    pub motion: MotionKind,
    pub noise: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn from_args(a: &SynthArgs) -> CliResult<Self> {
        if a.length < 2 {
            return Err(CliError::Usage(format!("--length must be at least 2, got {}", a.length)));
        }
        if a.cases == 0 {
            return Err(CliError::Usage("--cases must be at least 1".into()));
        }
        let (height, width) =
            parse_size(&a.size).ok_or_else(|| CliError::Usage(format!("--size expects HxW, got {:?}", a.size)))?;
        if height < 64 || width < 64 {
            return Err(CliError::Usage(format!("--size must be at least 64x64, got {}x{}", height, width)));
        }
        if !(a.motion_max >= 0.0 && a.motion_max.is_finite()) {
            return Err(CliError::Usage(format!("--motion-max must be >= 0, got {}", a.motion_max)));
        }
        if !(a.noise >= 0.0 && a.noise.is_finite()) {
            return Err(CliError::Usage(format!("--noise must be >= 0, got {}", a.noise)));
        }
        Ok(Self {
            length: a.length,
            height,
            width,
            motion_max: a.motion_max,
            motion: match a.motion {
                MotionArg::Smooth => MotionKind::SmoothRandom,
                MotionArg::Translation => MotionKind::Translation,
            },
            noise: a.noise,
            seed: a.seed,
        })
    }
}

/// The case `cmd_synth` writes as `case_<index>`.
pub fn synth_case(p: &SynthParams, index: usize) -> CliResult<SimulatedCase> {
    let (phantom_seed, motion_seed, noise_seed) = case_seeds(p.seed, index);
    let phantom = make_phantom(p.height, p.width, phantom_seed)?;
    let motion = MotionModel {
        kind: p.motion,
        max_magnitude: p.motion_max,
        seed: motion_seed,
        ..MotionModel::default()
    };
    Ok(simulate_sequence(&phantom, &default_times(p.length), p.noise, &motion, noise_seed)?)
}

pub fn case_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("case_{index:03}"))
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseManifest {
    case: usize,
    params: SynthParams,
    phantom_seed: u64,
    motion_seed: u64,
    noise_seed: u64,
    files: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    params: SynthParams,
    cases: Vec<String>,
}

/// Writes one case directory.
pub fn write_case(dir: &Path, case: &SimulatedCase) -> CliResult<()> {
    io::save_frames(&dir.join(FRAMES_FILE), case.sequence.frames())?;
    io::save_transforms(&dir.join(TRUTH_FILE), &case.ground_truth)?;
    io::save_masks(&dir.join(MASKS_FILE), &case.masks)?;
    io::save_landmarks(&dir.join(LANDMARKS_FILE), &case.landmarks)?;
    let times = case
        .sequence
        .times_ms()
        .ok_or_else(|| CliError::format(dir, "simulated sequence without times"))?;
    io::save_times(&dir.join(TIMES_FILE), &times)
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<Vec<PathBuf>> {
    let p = SynthParams::from_args(a)?;
    let dirs: Vec<PathBuf> = (0..a.cases).map(|i| case_dir(&a.out, i)).collect();
    (0..a.cases).into_par_iter().try_for_each(|i| -> CliResult<()> {
        let case = synth_case(&p, i)?;
        let dir = &dirs[i];
        write_case(dir, &case)?;
        let (phantom_seed, motion_seed, noise_seed) = case_seeds(p.seed, i);
        let files = [
            ("frames", FRAMES_FILE),
            ("ground_truth", TRUTH_FILE),
            ("masks", MASKS_FILE),
            ("landmarks", LANDMARKS_FILE),
            ("times", TIMES_FILE),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        io::write_json(
            &dir.join(MANIFEST_FILE),
            &CaseManifest {
                case: i,
                params: p,
                phantom_seed,
                motion_seed,
                noise_seed,
                files,
            },
        )
    })?;
    io::write_json(
        &a.out.join(MANIFEST_FILE),
        &DatasetManifest {
            params: p,
            cases: (0..a.cases).map(|i| format!("case_{i:03}")).collect(),
        },
    )?;
    Ok(dirs)
}

/// Engine configuration for the registration flags.
pub fn optim_config(a: &RegisterArgs) -> CliResult<OptimConfig> {
    let base = OptimConfig::default();
    let iters = match a.iters.as_slice() {
        [n] => vec![*n; a.scales],
        v => v.to_vec(),
    };
    let mut lw = base.loss_weights;
    if let Some(v) = a.lambda_f {
        lw.lambda_f = v;
    }
    if let Some(v) = a.lambda_s {
        lw.lambda_s = v;
    }
    if let Some(v) = a.lambda_c {
        lw.lambda_c = v;
    }
    let cfg = OptimConfig {
        scales: a.scales,
        iters_per_scale: iters,
        step_size: a.step,
        loss_weights: lw,
        feature_spec: match a.features {
            FeaturesArg::Off => FeatureExtractorSpec::disabled(),
            FeaturesArg::Handcrafted => FeatureExtractorSpec::default(),
        },
        aggregation: match a.agg {
            AggArg::Corr => Aggregation::Correlation,
            AggArg::Mean => Aggregation::Mean,
        },
        precision: match a.precision {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        },
        seed: a.seed,
        ..base
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterSummary {
    pub frames: usize,
    pub iterations: usize,
    pub initial_loss: Option<LossTerms>,
    pub final_loss: LossTerms,
    pub step_halvings: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsReport {
    pub image: Vec<f64>,
    pub feature: Option<Vec<f64>>,
    pub uniform: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub wall_time_ms_per_scale: Vec<f64>,
    pub total_ms: f64,
    pub aggregation_ms: f64,
    pub aggregation_share: f64,
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    case: &'a Path,
    init: &'a str,
    io_steps: usize,
    pipeline: Option<&'a Path>,
    optim: &'a OptimConfig,
}

#[derive(Serialize)]
struct LossRow {
    scale: usize,
    iteration: usize,
    step: f64,
    cte_image: f64,
    cte_feature: f64,
    smooth: f64,
    cyclic: f64,
    total: f64,
}

pub struct RegisterOutput {
    pub transforms: TransformSet<f32>,
    pub summary: RegisterSummary,
    pub weights: WeightsReport,
}

struct Outcome {
    transforms: TransformSet<f32>,
    history: Vec<LossRecord>,
    initial: LossTerms,
    final_loss: LossTerms,
    halvings: usize,
    weights: AggregationWeights,
    feature_weights: Option<AggregationWeights>,
    timing: Option<TimingReport>,
}

impl From<RegistrationResult<f32>> for Outcome {
    fn from(r: RegistrationResult<f32>) -> Self {
        let timing = TimingReport {
            wall_time_ms_per_scale: r.wall_time_ms.clone(),
            total_ms: r.total_time_ms(),
            aggregation_ms: r.aggregation_time_ms,
            aggregation_share: r.aggregation_share(),
        };
        Self {
            transforms: r.transforms,
            history: r.loss_history,
            initial: r.initial_loss,
            final_loss: r.final_loss,
            halvings: r.step_halvings,
            weights: r.weights_history,
            feature_weights: r.feature_weights,
            timing: Some(timing),
        }
    }
}

fn require_dir(dir: &Path) -> CliResult<()> {
    if !dir.is_dir() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "case directory not found"),
        ));
    }
    Ok(())
}

fn load_case_sequence(dir: &Path) -> CliResult<Sequence<f32>> {
    require_dir(dir)?;
    let times = dir.join(TIMES_FILE);
    io::load_sequence(&dir.join(FRAMES_FILE), times.exists().then_some(times.as_path()))
}

pub fn cmd_register(a: &RegisterArgs) -> CliResult<RegisterOutput> {
    let cfg = optim_config(a)?;
    let seq = load_case_sequence(&a.case)?;
    let (h, w) = seq.dims();

    let init = match a.init {
        InitArg::Zero => None,
        InitArg::Pipeline => {
            let params = match &a.pipeline {
                Some(p) => io::load_pipeline(p)?,
                None => init_params(&PipelineSpec {
                    scales: a.scales,
                    seed: a.seed,
                    ..PipelineSpec::default()
                })?,
            };
            Some(forward(&seq, &params)?)
        }
    };

    let outcome = match (init, a.io_steps) {
        (None, 0) => Outcome::from(register(&seq, &cfg)?),
        (Some(t), 0) => {
            let b = evaluate_loss(&seq, &cfg, &t)?;
            let terms = b.terms();
            Outcome {
                transforms: t,
                history: Vec::new(),
                initial: terms,
                final_loss: terms,
                halvings: 0,
                weights: b.image_weights,
                feature_weights: b.feature_weights,
                timing: None,
            }
        }
        (init, n) => {
            let start = init.unwrap_or_else(|| TransformSet::zeros(seq.len(), h, w));
            Outcome::from(register_with_init(&seq, &cfg.refinement(n), &start)?)
        }
    };
    let Outcome {
        transforms,
        history,
        initial,
        final_loss,
        halvings,
        weights,
        feature_weights,
        timing,
    } = outcome;
    if !final_loss.total.is_finite() {
        return Err(CliError::Core(setreg::Error::NonFinite(format!(
            "final loss {}",
            final_loss.total
        ))));
    }

    let warped = warp_all(seq.frames(), &transforms)?;
    io::save_transforms(&a.out.join(TRANSFORMS_FILE), &transforms)?;
    io::save_frames(&a.out.join(WARPED_FILE), &warped)?;
    if let Some(t) = seq.times_ms() {
        io::save_times(&a.out.join(TIMES_FILE), &t)?;
    }

    let loss_path = a.out.join("loss.csv");
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in &history {
        wtr.serialize(LossRow {
            scale: r.scale,
            iteration: r.iteration,
            step: r.step,
            cte_image: r.terms.cte_image,
            cte_feature: r.terms.cte_feature,
            smooth: r.terms.smooth,
            cyclic: r.terms.cyclic,
            total: r.terms.total,
        })
        .map_err(|source| CliError::Csv {
            path: loss_path.clone(),
            source,
        })?;
    }
    if history.is_empty() {
        wtr.write_record(["scale", "iteration", "step", "cte_image", "cte_feature", "smooth", "cyclic", "total"])
            .map_err(|source| CliError::Csv {
                path: loss_path.clone(),
                source,
            })?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::format(&loss_path, e.to_string()))?;
    std::fs::write(&loss_path, bytes).map_err(|e| CliError::io(&loss_path, e))?;

    io::write_json(
        &a.out.join("config.json"),
        &ConfigEcho {
            case: &a.case,
            init: match a.init {
                InitArg::Zero => "zero",
                InitArg::Pipeline => "pipeline",
            },
            io_steps: a.io_steps,
            pipeline: a.pipeline.as_deref(),
            optim: &cfg,
        },
    )?;
    let weights_report = WeightsReport {
        uniform: weights.is_uniform(1e-12),
        image: weights.as_slice().to_vec(),
        feature: feature_weights.map(|w| w.as_slice().to_vec()),
    };
    io::write_json(&a.out.join("weights.json"), &weights_report)?;
    let summary = RegisterSummary {
        frames: seq.len(),
        iterations: history.len(),
        initial_loss: Some(initial),
        final_loss,
        step_halvings: halvings,
    };
    io::write_json(&a.out.join("summary.json"), &summary)?;
    if let Some(t) = timing {
        io::write_json(&a.out.join("timing.json"), &t)?;
    }
    Ok(RegisterOutput {
        transforms,
        summary,
        weights: weights_report,
    })
}

pub fn label_name(label: u8) -> String {
    match label {
        BLOOD => "blood".into(),
        MYOCARDIUM => "myocardium".into(),
        BAND => "band".into(),
        l => format!("label_{l}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<BTreeMap<String, MeanSd>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tre: Option<f64>,
    pub log_det_j_std: f64,
    pub folding_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint_error_interior: Option<f64>,
    pub margin: usize,
}

impl Metrics {
    /// `(name, value)` rows of the CSV report.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("frames".to_string(), self.frames as f64)];
        for (name, d) in self.dice.iter().flatten() {
            rows.push((format!("dice_{name}_mean"), d.mean));
            rows.push((format!("dice_{name}_sd"), d.sd));
        }
        if let Some(t) = self.tre {
            rows.push(("tre".into(), t));
        }
        rows.push(("log_det_j_std".into(), self.log_det_j_std));
        rows.push(("folding_ratio".into(), self.folding_ratio));
        if let Some(e) = self.endpoint_error {
            rows.push(("endpoint_error".into(), e));
        }
        if let Some(e) = self.endpoint_error_interior {
            rows.push(("endpoint_error_interior".into(), e));
        }
        rows
    }
}

/// Pixels at least `margin` away from every border.
pub fn interior_region(h: usize, w: usize, margin: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            x >= margin && y >= margin && x + margin < w && y + margin < h
        })
        .collect()
}

/// Metrics of `transforms` on a simulated case held in memory.
pub fn case_metrics(
    transforms: &TransformSet<f32>,
    masks: Option<&[LabelMask]>,
    landmarks: Option<&setreg::LandmarkSet>,
    truth: Option<&TransformSet<f32>>,
    margin: usize,
) -> CliResult<Metrics> {
    let dice = match masks {
        Some(masks) => {
            if masks.len() != transforms.len() {
                return Err(CliError::Core(setreg::Error::LengthMismatch {
                    expected: transforms.len(),
                    actual: masks.len(),
                }));
            }
            let warped = masks
                .iter()
                .zip(transforms.fields())
                .map(|(m, u)| warp_labels(m, u))
                .collect::<setreg::Result<Vec<_>>>()?;
            let mut labels: Vec<u8> = masks.iter().flat_map(|m| m.labels().iter().copied()).collect();
            labels.sort_unstable();
            labels.dedup();
            let mut out = BTreeMap::new();
            for l in labels.into_iter().filter(|&l| l != 0) {
                out.insert(label_name(l), all_pair_dice(&warped, l)?);
            }
            Some(out)
        }
        None => None,
    };
    let tre = match landmarks {
        Some(set) if !set.points.is_empty() => {
            let mapped = map_landmarks(set, transforms)?;
            let reference = landmark_reference(&mapped, None)?;
            Some(tre(&mapped, &reference)?)
        }
        _ => None,
    };
    let (endpoint, interior) = match truth {
        Some(g) => {
            let (h, w) = g.dims().unwrap_or((0, 0));
            let region = interior_region(h, w, margin);
            (
                Some(endpoint_error(transforms, g, None)?),
                Some(endpoint_error(transforms, g, Some(&region))?),
            )
        }
        None => (None, None),
    };
    Ok(Metrics {
        frames: transforms.len(),
        dice,
        tre,
        log_det_j_std: log_det_j_std(transforms),
        folding_ratio: folding_ratio(transforms),
        endpoint_error: endpoint,
        endpoint_error_interior: interior,
        margin,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<Metrics> {
    require_dir(&a.case)?;
    let transforms = match (&a.transforms, a.identity) {
        (Some(p), false) => io::load_transforms(p)?,
        (None, true) => {
            let frames = io::load_frames(&a.case.join(FRAMES_FILE))?;
            let (h, w) = frames.first().map_or((0, 0), |f| f.dims());
            TransformSet::zeros(frames.len(), h, w)
        }
        _ => return Err(CliError::Usage("give exactly one of --transforms and --identity".into())),
    };
    let optional = |name: &str| {
        let p = a.case.join(name);
        p.exists().then_some(p)
    };
    let masks = optional(MASKS_FILE).map(|p| io::load_masks(&p)).transpose()?;
    let landmarks = optional(LANDMARKS_FILE).map(|p| io::load_landmarks(&p)).transpose()?;
    let truth = optional(TRUTH_FILE).map(|p| io::load_transforms(&p)).transpose()?;
    let m = case_metrics(&transforms, masks.as_deref(), landmarks.as_ref(), truth.as_ref(), a.margin)?;

    io::write_json(&a.out.join("metrics.json"), &m)?;
    let path = a.out.join("metrics.csv");
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |source| CliError::Csv {
        path: path.clone(),
        source,
    };
    wtr.write_record(["metric", "value"]).map_err(csv_err)?;
    for (k, v) in m.rows() {
        wtr.write_record([k, v.to_string()]).map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::format(&path, e.to_string()))?;
    std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok(m)
}

/// The fitting region: majority vote of the (optionally warped) masks,
/// reduced to one label.
pub fn fit_region(masks: &[LabelMask], transforms: Option<&TransformSet<f32>>, label: u8) -> CliResult<LabelMask> {
    let voted = match transforms {
        Some(t) => {
            if t.len() != masks.len() {
                return Err(CliError::Core(setreg::Error::LengthMismatch {
                    expected: t.len(),
                    actual: masks.len(),
                }));
            }
            let warped = masks
                .iter()
                .zip(t.fields())
                .map(|(m, u)| warp_labels(m, u))
                .collect::<setreg::Result<Vec<_>>>()?;
            majority_mask(&warped)?
        }
        None => majority_mask(masks)?,
    };
    let (h, w) = voted.dims();
    Ok(LabelMask::new(
        h,
        w,
        voted.labels().iter().map(|&l| (l == label) as u8).collect(),
    )?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub fitted: usize,
    pub converged: usize,
    pub median_r2: Option<f64>,
    pub survival: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct PngWindow {
    lo: f64,
    hi: f64,
    unit: &'static str,
}

pub fn cmd_fit(a: &FitArgs) -> CliResult<FitSummary> {
    let frames = io::load_frames(&a.frames)?;
    let times = io::load_times(&a.times)?;
    if times.len() != frames.len() {
        return Err(CliError::Core(setreg::Error::LengthMismatch {
            expected: frames.len(),
            actual: times.len(),
        }));
    }
    let seq = Sequence::with_times(frames, &times)?;
    let region = if a.mask == "none" {
        None
    } else {
        let masks = io::load_masks(Path::new(&a.mask))?;
        let transforms = a.transforms.as_deref().map(io::load_transforms).transpose()?;
        Some(fit_region(&masks, transforms.as_ref(), a.label)?)
    };
    let opts = FitOptions {
        max_iterations: a.max_iterations,
        ..FitOptions::default()
    };
    let fit = fit_map(&seq, &times, region.as_ref(), &opts)?;

    let maps: [(&str, &Image<f64>); 6] = [
        ("a.f32", &fit.a),
        ("b.f32", &fit.b),
        ("t1_star.f32", &fit.t1_star),
        ("t1.f32", &fit.t1),
        ("r2.f32", &fit.r2),
        ("sd_t1.f32", &fit.sd_t1),
    ];
    for (name, img) in maps {
        io::save_map(&a.out.join(name), img)?;
    }
    let (h, w) = seq.dims();
    io::write_u8(
        &a.out.join("fitted.u8"),
        &[h, w],
        &fit.fitted.iter().map(|&f| f as u8).collect::<Vec<_>>(),
    )?;

    let survival = r2_survival(&fit.r2, Some(&fit.fitted), &SURVIVAL_THRESHOLDS)?;
    let path = a.out.join("survival.csv");
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |source| CliError::Csv {
        path: path.clone(),
        source,
    };
    wtr.write_record(["threshold", "fraction"]).map_err(csv_err)?;
    for (t, f) in &survival {
        wtr.write_record([t.to_string(), f.to_string()]).map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::format(&path, e.to_string()))?;
    std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;

    let mut windows = BTreeMap::new();
    for (name, lo, hi, unit) in PNG_WINDOWS {
        let img = match name {
            "t1.png" => &fit.t1,
            "t1_star.png" => &fit.t1_star,
            _ => &fit.r2,
        };
        io::save_png(&a.out.join(name), img, (lo, hi))?;
        windows.insert(name, PngWindow { lo, hi, unit });
    }
    io::write_json(&a.out.join("png_windows.json"), &windows)?;

    let summary = FitSummary {
        fitted: fit.fitted.iter().filter(|&&f| f).count(),
        converged: fit.converged.iter().filter(|&&c| c).count(),
        median_r2: fit.median_r2(None),
        survival,
    };
    io::write_json(&a.out.join("fit_summary.json"), &summary)?;
    Ok(summary)
}
