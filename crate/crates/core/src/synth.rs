//! Synthetic ground truth: a cardiac-like phantom, inversion-recovery
//! contrast, known smooth motion, and the masks and landmarks that follow it.
//!
//! Contrast is synthesized in the canonical (motion-free) frame first and
//! the anatomy is moved afterwards, so frame `i` is
//! `S_i(x + g_i(x)) + noise` with `g_i` the ground-truth field.
//! Every output is a pure function of its seed and parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{gaussian_kernel, separable};
use crate::qmap::{model_eval, SignalModel};
use crate::types::{
    DisplacementField, Image, LabelMask, Landmark, LandmarkSet, Sequence, TransformSet,
};
use crate::warp::{invert_point, warp_image, warp_labels};

pub const BACKGROUND: u8 = 0;
pub const BLOOD: u8 = 1;
pub const MYOCARDIUM: u8 = 2;
pub const BAND: u8 = 3;

/// Nominal `(A, B, T1*)` per label, indexed by label value.
pub const TISSUES: [(f64, f64, f64); 4] = [
    (1.0, 2.0, 300.0),
    (1.0, 2.0, 1800.0),
    (1.0, 2.0, 1100.0),
    (1.0, 2.0, 600.0),
];

// Relative amplitude of the proton-density texture. It scales A and B
// together, so B/A (and hence every null time) is unchanged.
const TEXTURE_AMPLITUDE: f64 = 0.3;
const TEXTURE_SCALE: f64 = 6.0;
const LANDMARK_INVERSION_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub labels: LabelMask,
    pub a: Image<f64>,
    pub b: Image<f64>,
    pub t1_star: Image<f64>,
    /// Two points on the blood/myocardium boundary, `(x, y)` in pixels.
    pub landmarks: Vec<(f64, f64)>,
}

impl Phantom {
    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    /// Motion-free signal at inversion time `t_ms`.
    pub fn signal(&self, t_ms: f64) -> Image<f64> {
        let (h, w) = self.dims();
        let data = (0..h * w)
            .map(|i| {
                let m = SignalModel {
                    kind: Default::default(),
                    a: self.a.data()[i],
                    b: self.b.data()[i],
                    t1_star: self.t1_star.data()[i],
                };
                model_eval(&m, t_ms)
            })
            .collect();
        Image::from_raw(h, w, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    #[default]
    SmoothRandom,
    Translation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    pub kind: MotionKind,
    /// Pixels; the generated fields never exceed it.
    pub max_magnitude: f64,
    /// Pixels; must be at least 4.
    pub correlation_length: f64,
    pub seed: u64,
}

impl Default for MotionModel {
    fn default() -> Self {
        Self {
            kind: MotionKind::SmoothRandom,
            max_magnitude: 5.0,
            correlation_length: 32.0,
            seed: 0,
        }
    }
}

impl MotionModel {
    pub fn none() -> Self {
        Self {
            max_magnitude: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedCase {
    pub sequence: Sequence<f32>,
    pub ground_truth: TransformSet<f32>,
    pub masks: Vec<LabelMask>,
    pub landmarks: LandmarkSet,
}

/// `len` inversion times evenly spaced over `[100, 3100]` ms.
pub fn default_times(len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![100.0],
        _ => (0..len)
            .map(|i| 100.0 + 3000.0 * i as f64 / (len - 1) as f64)
            .collect(),
    }
}

/// White noise filtered by a Gaussian of the given sigma. Noise is drawn on
/// a padded grid and cropped so the border sees the same statistics as the
/// interior.
fn smooth_noise(h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let noise: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(rng)).collect();
    let smooth = separable(&noise, ph, pw, &k);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&smooth[(y + r) * pw + r..(y + r) * pw + r + w]);
    }
    out
}

pub fn make_phantom(height: usize, width: usize, seed: u64) -> Result<Phantom> {
    if height < 64 || width < 64 {
        return Err(Error::InvalidArgument(format!(
            "phantom needs at least 64x64, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let s = hf.min(wf);
    let mut jitter = |frac: f64| rng.gen_range(-frac..=frac);

    let cx = wf / 2.0 + jitter(0.03) * s;
    let cy = 0.42 * hf + jitter(0.03) * s;
    let rb = 0.12 * s * (1.0 + jitter(0.1));
    let thick = 0.07 * s * (1.0 + jitter(0.1));
    let ecc = 1.0 + jitter(0.1);
    let band_phase = jitter(std::f64::consts::PI);
    let theta = [3.6 + jitter(0.15), 4.4 + jitter(0.15)];

    // Elliptical radius: `rb` on the inner boundary, `rb + thick` outside.
    let radius = |x: f64, y: f64| (((x - cx) / ecc).powi(2) + ((y - cy) * ecc).powi(2)).sqrt();
    let band_top =
        |x: f64| 0.74 * hf + 0.04 * s * (2.0 * std::f64::consts::PI * x / wf + band_phase).sin();

    let labels = LabelMask::from_fn(height, width, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let r = radius(xf, yf);
        if r < rb {
            BLOOD
        } else if r < rb + thick {
            MYOCARDIUM
        } else if yf > band_top(xf) {
            BAND
        } else {
            BACKGROUND
        }
    });

    let fine = smooth_noise(height, width, TEXTURE_SCALE / 2.0, &mut rng);
    let coarse = smooth_noise(height, width, TEXTURE_SCALE * 2.0, &mut rng);
    let mix: Vec<f64> = fine.iter().zip(&coarse).map(|(f, c)| 0.5 * f + c).collect();
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let rho: Vec<f64> = mix.iter().map(|v| 1.0 + TEXTURE_AMPLITUDE * v / peak).collect();

    let tissue = |i: usize| TISSUES[labels.labels()[i] as usize];
    let n = height * width;
    let a = Image::from_raw(height, width, (0..n).map(|i| tissue(i).0 * rho[i]).collect());
    let b = Image::from_raw(height, width, (0..n).map(|i| tissue(i).1 * rho[i]).collect());
    let t1_star = Image::from_raw(height, width, (0..n).map(|i| tissue(i).2).collect());

    let landmarks = theta
        .iter()
        .map(|t| (cx + rb * ecc * t.cos(), cy + rb / ecc * t.sin()))
        .collect();

    Ok(Phantom {
        labels,
        a,
        b,
        t1_star,
        landmarks,
    })
}

/// Gaussian-filtered white-noise vector field rescaled so that its largest
/// displacement norm equals `max_magnitude`.
pub fn smooth_random_field(
    height: usize,
    width: usize,
    max_magnitude: f64,
    correlation_length: f64,
    seed: u64,
) -> Result<DisplacementField<f32>> {
    if !(correlation_length >= 4.0) {
        return Err(Error::InvalidArgument(format!(
            "correlation length must be >= 4 px, got {correlation_length}"
        )));
    }
    if !(max_magnitude >= 0.0) || !max_magnitude.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "max magnitude must be finite and >= 0, got {max_magnitude}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    if max_magnitude == 0.0 {
        return Ok(DisplacementField::zeros(height, width));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = correlation_length / 2.0;
    let ux = smooth_noise(height, width, sigma, &mut rng);
    let uy = smooth_noise(height, width, sigma, &mut rng);
    let peak = ux
        .iter()
        .zip(&uy)
        .map(|(x, y)| x.hypot(*y))
        .fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Ok(DisplacementField::zeros(height, width));
    }
    // f32 rounding may push the peak a hair over the bound.
    let scale = max_magnitude / peak * (1.0 - 1e-6);
    let to = |v: &[f64]| v.iter().map(|x| (x * scale) as f32).collect::<Vec<f32>>();
    Ok(DisplacementField::from_raw(height, width, to(&ux), to(&uy)))
}

fn motion_field(h: usize, w: usize, motion: &MotionModel, frame: usize) -> Result<DisplacementField<f32>> {
    // One independent stream per frame.
    let frame_seed = motion
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(frame as u64 + 1);
    match motion.kind {
        MotionKind::SmoothRandom => {
            smooth_random_field(h, w, motion.max_magnitude, motion.correlation_length, frame_seed)
        }
        MotionKind::Translation => {
            if !(motion.max_magnitude >= 0.0) || !motion.max_magnitude.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "max magnitude must be finite and >= 0, got {}",
                    motion.max_magnitude
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
            let mag = motion.max_magnitude * rng.gen::<f64>();
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            Ok(DisplacementField::constant(
                h,
                w,
                (mag * angle.cos()) as f32,
                (mag * angle.sin()) as f32,
            ))
        }
    }
}

/// Frames `S(t_i)` moved by per-frame ground-truth motion plus additive
/// Gaussian noise of standard deviation `noise_sigma` (in units of the
/// nominal `A = 1`).
pub fn simulate_sequence(
    phantom: &Phantom,
    times: &[f64],
    noise_sigma: f64,
    motion: &MotionModel,
    seed: u64,
) -> Result<SimulatedCase> {
    if times.len() < 2 {
        return Err(Error::TooFewFrames {
            min: 2,
            actual: times.len(),
        });
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let (h, w) = phantom.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(times.len());
    let mut fields = Vec::with_capacity(times.len());
    let mut masks = Vec::with_capacity(times.len());
    let mut points = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        let g = motion_field(h, w, motion, i)?;
        let g64 = g.cast::<f64>();
        let moved = warp_image(&phantom.signal(t), &g64)?;
        let data = moved
            .data()
            .iter()
            .map(|v| {
                let n = if noise_sigma > 0.0 {
                    noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                (v + n) as f32
            })
            .collect();
        frames.push(Image::from_raw(h, w, data));
        masks.push(warp_labels(&phantom.labels, &g)?);
        for &p in &phantom.landmarks {
            // The landmark sits where the frame samples the canonical point.
            let (x, y) = invert_point(&g, p, LANDMARK_INVERSION_ITERS);
            points.push(Landmark {
                frame: i,
                x: x.clamp(0.0, (w - 1) as f64),
                y: y.clamp(0.0, (h - 1) as f64),
            });
        }
        fields.push(g);
    }
    Ok(SimulatedCase {
        sequence: Sequence::with_times(frames, times)?,
        ground_truth: TransformSet::new(fields)?,
        masks,
        landmarks: LandmarkSet::new(points),
    })
}
