//! Set-based groupwise registration for variable-length, variable-contrast
//! image sequences.
//!
//! A sequence is treated as an unordered set of frames. Every frame is
//! processed by the same operators, and the only cross-frame coupling is a
//! permutation-invariant template built by correlation-guided aggregation.
//! Registration is therefore permutation-equivariant: permuting the input
//! frames permutes the output transforms and nothing else.
//!
//! Module map:
//! - [`types`]: images, sequences, displacement fields, permutations, masks.
//! - [`warp`]: bilinear sampling, composition, upsampling, Jacobians.
//! - [`setagg`]: correlation-guided (and mean) set aggregation.
//! - [`features`]: hand-crafted contrast-insensitive feature stream.
//! - [`loss`]: soft histograms, conditional template entropy, regularizers.
//! - [`pipeline`]: forward-only equivariant multi-scale set network.
//! - [`engine`]: multi-scale instance optimization of dense fields.
//! - [`qmap`]: inversion-recovery signal model and voxel-wise fitting.
//! - [`synth`]: phantom, contrast and motion simulation.
//! - [`metrics`]: Dice, TRE, Jacobian statistics, R² survival.

pub mod engine;
pub mod error;
pub mod features;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod qmap;
pub mod real;
pub mod setagg;
pub mod synth;
pub mod types;
pub mod warp;

mod adam;

pub use error::{Error, Result};
pub use real::Real;
pub use types::{
    normalize_intensity, permute_sequence, permute_transforms, DisplacementField, FeatureMap,
    FrameMeta, Image, LabelMask, Landmark, LandmarkSet, Permutation, Sequence, TransformSet,
};
