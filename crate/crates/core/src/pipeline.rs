//! Forward-only multi-scale set network.
//!
//! Every frame runs through the same encoder, the only cross-frame path is a
//! correlation-weighted template broadcast back to every frame, and a shared
//! decoder turns `[z_i, T]` into an incremental field per frame. Permuting
//! the input frames therefore permutes the output fields and nothing else,
//! whatever the parameter values, and the same parameters serve any number
//! of frames.
//!
//! Wiring, with `k = 1` the finest scale:
//! - `e_i^(k)`: pool the frame by `2^(k-1)`, 3x3 conv, leaky ReLU.
//! - bottom-up context: `z^(1) = e^(1)`, and
//!   `z^(k+1) = e^(k+1) + pool2(σ(Conv([z^(k), T^(k)])))` where `T^(k)` is the
//!   correlation template of the `z_i^(k)`.
//! - top-down decoding from `k = K` to `1`: a two-layer conv head on
//!   `[z_i^(k), T^(k)]` yields `φ_i^(k)` in scale-`k` pixels, composed as
//!   `C^(k) = φ^(k) ∘ up2(C^(k+1))`.
//!
//! There is no training loop. With the decoder head at its zero
//! initialization the output is exactly the identity, which makes the
//! network a safe warm start for the engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::setagg::{correlation_template, FeatureSet};
use crate::types::{DisplacementField, FeatureMap, Image, Sequence, TransformSet};
use crate::warp::{compose, downsample_plane, upsample_field};

const LEAK: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub scales: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            scales: 4,
            channels: 16,
            seed: 0,
        }
    }
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "pipeline needs scales >= 1 and channels >= 1, got {} and {}",
                self.scales, self.channels
            )));
        }
        Ok(())
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << (self.scales - 1);
        if height % f != 0 || width % f != 0 || height < f || width < f {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} is not divisible by {f} ({} scales)",
                self.scales
            )));
        }
        Ok(())
    }
}

/// 3x3 convolution with border clamping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3 {
    pub cin: usize,
    pub cout: usize,
    /// `cout x cin x 3 x 3`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3 {
    fn random(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / ((cin * 9) as f32).sqrt();
        Self {
            cin,
            cout,
            weight: (0..cout * cin * 9).map(|_| rng.gen_range(-s..=s)).collect(),
            bias: vec![0.0; cout],
        }
    }

    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![0.0; cout * cin * 9],
            bias: vec![0.0; cout],
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `input` holds `cin` planes of `h x w`.
    fn apply<T: Real>(&self, input: &[T], h: usize, w: usize) -> Vec<T> {
        debug_assert_eq!(input.len(), self.cin * h * w);
        let n = h * w;
        let mut out = vec![T::zero(); self.cout * n];
        let clamp = |v: i64, m: usize| v.clamp(0, m as i64 - 1) as usize;
        for o in 0..self.cout {
            let plane = &mut out[o * n..(o + 1) * n];
            let b = T::of(self.bias[o] as f64);
            plane.iter_mut().for_each(|v| *v = b);
            for c in 0..self.cin {
                let src = &input[c * n..(c + 1) * n];
                let k = &self.weight[(o * self.cin + c) * 9..(o * self.cin + c + 1) * 9];
                for (t, &kv) in k.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let kv = T::of(kv as f64);
                    let (dy, dx) = (t as i64 / 3 - 1, t as i64 % 3 - 1);
                    for y in 0..h {
                        let sy = clamp(y as i64 + dy, h);
                        for x in 0..w {
                            let sx = clamp(x as i64 + dx, w);
                            plane[y * w + x] = plane[y * w + x] + kv * src[sy * w + sx];
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    /// 1 -> C.
    pub encoder: Conv3,
    /// 2C -> C, feeding the next coarser scale; absent at the coarsest.
    pub update: Option<Conv3>,
    /// 2C -> C.
    pub decoder_hidden: Conv3,
    /// C -> 2; zero at initialization.
    pub decoder_head: Conv3,
}

/// One parameter set per scale, shared by every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub spec: PipelineSpec,
    /// Finest scale first.
    pub scales: Vec<ScaleParams>,
}

impl PipelineParams {
    fn convs(&self) -> impl Iterator<Item = &Conv3> {
        self.scales.iter().flat_map(|s| {
            std::iter::once(&s.encoder)
                .chain(s.update.iter())
                .chain([&s.decoder_hidden, &s.decoder_head])
        })
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv3> {
        self.scales.iter_mut().flat_map(|s| {
            std::iter::once(&mut s.encoder)
                .chain(s.update.iter_mut())
                .chain([&mut s.decoder_hidden, &mut s.decoder_head])
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().map(Conv3::len).sum()
    }

    /// All weights then biases of every convolution, in a fixed order.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for c in self.convs() {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    pub fn from_flat(spec: PipelineSpec, flat: &[f32]) -> Result<Self> {
        let mut p = init_params(&spec)?;
        if flat.len() != p.parameter_count() {
            return Err(Error::LengthMismatch {
                expected: p.parameter_count(),
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for c in p.convs_mut() {
            let (wl, bl) = (c.weight.len(), c.bias.len());
            c.weight.copy_from_slice(&flat[at..at + wl]);
            c.bias.copy_from_slice(&flat[at + wl..at + wl + bl]);
            at += wl + bl;
        }
        Ok(p)
    }

    /// Replaces the zero decoder heads with random weights of the given
    /// scale, so the network emits non-trivial fields. Used to exercise the
    /// architectural properties.
    pub fn with_random_head(mut self, amplitude: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut self.scales {
            let h = &mut s.decoder_head;
            let lim = amplitude / ((h.cin * 9) as f32).sqrt();
            h.weight.iter_mut().for_each(|v| *v = rng.gen_range(-lim..=lim));
            h.bias.iter_mut().for_each(|v| *v = rng.gen_range(-lim..=lim));
        }
        self
    }
}

pub fn init_params(spec: &PipelineSpec) -> Result<PipelineParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.channels;
    let scales = (0..spec.scales)
        .map(|k| ScaleParams {
            encoder: Conv3::random(1, c, &mut rng),
            update: (k + 1 < spec.scales).then(|| Conv3::random(2 * c, c, &mut rng)),
            decoder_hidden: Conv3::random(2 * c, c, &mut rng),
            decoder_head: Conv3::zeros(c, 2),
        })
        .collect();
    Ok(PipelineParams { spec: *spec, scales })
}

fn leaky<T: Real>(v: &mut [T]) {
    let leak = T::of(LEAK);
    v.iter_mut().for_each(|x| {
        if *x < T::zero() {
            *x = *x * leak
        }
    });
}

fn pool_channels<T: Real>(data: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    if f == 1 {
        return data.to_vec();
    }
    let n = h * w;
    (0..c)
        .flat_map(|ch| downsample_plane(&data[ch * n..(ch + 1) * n], h, w, f))
        .collect()
}

/// Frame features at scale `k` (1 = finest): `C x H/2^(k-1) x W/2^(k-1)`.
pub fn encode_frame<T: Real>(img: &Image<T>, params: &PipelineParams, k: usize) -> Result<FeatureMap<T>> {
    if k == 0 || k > params.scales.len() {
        return Err(Error::InvalidArgument(format!(
            "scale {k} outside 1..={}",
            params.scales.len()
        )));
    }
    let (h, w) = img.dims();
    let f = 1usize << (k - 1);
    if h % f != 0 || w % f != 0 || h < f || w < f {
        return Err(Error::ShapeMismatch(format!("{h}x{w} is not divisible by {f}")));
    }
    let (sh, sw) = (h / f, w / f);
    let pooled = downsample_plane(img.data(), h, w, f);
    let conv = &params.scales[k - 1].encoder;
    let mut z = conv.apply(&pooled, sh, sw);
    leaky(&mut z);
    FeatureMap::new(conv.cout, sh, sw, z)
}

fn concat<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Vec<T> {
    let mut v = Vec::with_capacity(a.data().len() + b.data().len());
    v.extend_from_slice(a.data());
    v.extend_from_slice(b.data());
    v
}

/// Runs the network on a sequence; the result has one full-resolution field
/// per frame.
pub fn forward<T: Real>(seq: &Sequence<T>, params: &PipelineParams) -> Result<TransformSet<T>> {
    let spec = params.spec;
    spec.validate()?;
    if params.scales.len() != spec.scales {
        return Err(Error::InvalidArgument(format!(
            "{} parameter scales for a {}-scale spec",
            params.scales.len(),
            spec.scales
        )));
    }
    if seq.len() < 2 {
        return Err(Error::TooFewFrames {
            min: 2,
            actual: seq.len(),
        });
    }
    let (h, w) = seq.dims();
    spec.check_dims(h, w)?;
    let kk = spec.scales;
    let c = spec.channels;

    // Bottom-up: contextual features and templates, finest first.
    let mut zs: Vec<Vec<FeatureMap<T>>> = Vec::with_capacity(kk);
    let mut templates: Vec<FeatureMap<T>> = Vec::with_capacity(kk);
    for k in 1..=kk {
        let mut z: Vec<FeatureMap<T>> = seq
            .frames()
            .par_iter()
            .map(|f| encode_frame(f, params, k))
            .collect::<Result<_>>()?;
        if k > 1 {
            let conv = params.scales[k - 2]
                .update
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("scale {} lacks an update conv", k - 1)))?;
            let prev = &zs[k - 2];
            let t = &templates[k - 2];
            let (ph, pw) = prev[0].dims();
            z = z
                .into_par_iter()
                .zip(prev.par_iter())
                .map(|(e, zp)| {
                    let mut u = conv.apply(&concat(zp, t), ph, pw);
                    leaky(&mut u);
                    let pooled = pool_channels(&u, c, ph, pw, 2);
                    let data = e.data().iter().zip(&pooled).map(|(a, b)| *a + *b).collect();
                    FeatureMap::new(c, ph / 2, pw / 2, data)
                })
                .collect::<Result<_>>()?;
        }
        let (t, _) = correlation_template(&FeatureSet::new(z.clone())?)?;
        templates.push(t);
        zs.push(z);
    }

    // Top-down: decode and compose, coarsest first.
    let mut total: Option<Vec<DisplacementField<T>>> = None;
    for k in (1..=kk).rev() {
        let sp = &params.scales[k - 1];
        let t = &templates[k - 1];
        let (sh, sw) = t.dims();
        let phis: Vec<DisplacementField<T>> = zs[k - 1]
            .par_iter()
            .map(|z| {
                let mut hid = sp.decoder_hidden.apply(&concat(z, t), sh, sw);
                leaky(&mut hid);
                let out = sp.decoder_head.apply(&hid, sh, sw);
                let n = sh * sw;
                DisplacementField::new(sh, sw, out[..n].to_vec(), out[n..].to_vec())
            })
            .collect::<Result<_>>()?;
        total = Some(match total {
            None => phis,
            Some(prev) => phis
                .iter()
                .zip(&prev)
                .map(|(phi, c)| compose(phi, &upsample_field(c, 2)))
                .collect::<Result<_>>()?,
        });
    }
    TransformSet::new(total.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{permute_sequence, permute_transforms, Permutation};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_seq<T: Real>(len: usize, h: usize, w: usize, seed: u64) -> Sequence<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..len)
            .map(|_| Image::from_fn(h, w, |_, _| T::of(rng.gen::<f64>())))
            .collect();
        Sequence::new(frames, None).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let s = PipelineSpec::default();
        assert_eq!(init_params(&s).unwrap(), init_params(&s).unwrap());
        let other = PipelineSpec { seed: 1, ..s };
        assert_ne!(init_params(&s).unwrap().to_flat(), init_params(&other).unwrap().to_flat());
        assert!(init_params(&PipelineSpec { scales: 0, ..s }).is_err());
    }

    #[test]
    fn init_weights_respect_fan_in_bound() {
        let p = init_params(&PipelineSpec::default()).unwrap();
        for sc in &p.scales {
            let lim = 1.0 / ((sc.decoder_hidden.cin * 9) as f32).sqrt();
            assert!(sc.decoder_hidden.weight.iter().all(|v| v.abs() <= lim));
            assert!(sc.decoder_head.weight.iter().all(|v| *v == 0.0));
        }
        assert!(p.scales.last().unwrap().update.is_none());
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(&PipelineSpec::default()).unwrap().with_random_head(1.0, 3);
        let q = PipelineParams::from_flat(p.spec, &p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(PipelineParams::from_flat(p.spec, &[0.0; 3]).is_err());
    }

    #[test]
    fn encoder_shapes_and_sharing() {
        let p = init_params(&PipelineSpec::default()).unwrap();
        let img = random_seq::<f32>(2, 64, 64, 1).frames()[0].clone();
        let z = encode_frame(&img, &p, 2).unwrap();
        assert_eq!(z.shape(), (16, 32, 32));
        assert_eq!(z, encode_frame(&img.clone(), &p, 2).unwrap());
        let zero = encode_frame(&Image::<f32>::zeros(64, 64), &p, 1).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
        assert!(encode_frame(&Image::<f32>::zeros(60, 60), &p, 4).is_err());
    }

    #[test]
    fn zero_head_gives_identity() {
        let p = init_params(&PipelineSpec::default()).unwrap();
        let out = forward(&random_seq::<f32>(3, 64, 64, 2), &p).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.dims(), Some((64, 64)));
        assert!(out.fields().iter().all(|f| f.max_norm() == 0.0));
    }

    #[test]
    fn random_head_moves_pixels() {
        let p = init_params(&PipelineSpec::default()).unwrap().with_random_head(1.0, 5);
        let out = forward(&random_seq::<f32>(3, 32, 32, 2), &p).unwrap();
        assert!(out.fields().iter().all(|f| f.max_norm() > 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = init_params(&PipelineSpec::default()).unwrap();
        assert!(forward(&random_seq::<f32>(2, 36, 36, 0), &p).is_err());
    }

    #[test]
    fn any_length_runs_with_the_same_params() {
        let p = init_params(&PipelineSpec { channels: 4, ..Default::default() })
            .unwrap()
            .with_random_head(1.0, 1);
        for len in [2, 5, 17] {
            assert_eq!(forward(&random_seq::<f32>(len, 16, 16, len as u64), &p).unwrap().len(), len);
        }
    }

    #[test]
    fn forward_is_bit_stable() {
        let p = init_params(&PipelineSpec::default()).unwrap().with_random_head(1.0, 4);
        let s = random_seq::<f32>(4, 32, 32, 9);
        assert_eq!(forward(&s, &p).unwrap(), forward(&s, &p).unwrap());
    }

    fn equivariance_gap<T: Real>(len: usize, seed: u64) -> f64 {
        let spec = PipelineSpec { channels: 6, seed, ..Default::default() };
        let p = init_params(&spec).unwrap().with_random_head(1.0, seed ^ 7);
        let s = random_seq::<T>(len, 16, 16, seed);
        let perm = Permutation::random(len, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let a = permute_transforms(&forward(&s, &p).unwrap(), &perm).unwrap();
        let b = forward(&permute_sequence(&s, &perm).unwrap(), &p).unwrap();
        a.max_abs_diff(&b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn forward_is_equivariant_single(len in 2usize..=12, seed in any::<u64>()) {
            prop_assert!(equivariance_gap::<f32>(len, seed) < 1e-4);
        }

        #[test]
        fn forward_is_equivariant_double(len in 2usize..=12, seed in any::<u64>()) {
            prop_assert!(equivariance_gap::<f64>(len, seed) < 1e-9);
        }
    }
}
