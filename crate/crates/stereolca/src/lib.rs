//! Convolutional stereo sparse coding with simple probabilistic readout.
//!
//! The crate implements a full stereo-vision processing pipeline:
//!
//! * [`imagecore`] — grayscale image container, PNG ingestion, Gaussian and
//!   difference-of-Gaussians filtering, resampling and joint pair
//!   normalization,
//! * [`datagen`] — synthetic stimulus databases (shifted stereo pairs,
//!   virtual-vergence homography warps, slanted-plane renders with ground
//!   truth),
//! * [`lca`] — convolutional locally competitive sparse coding: encoding by
//!   leaky-integrator dynamics with hard thresholding, reconstruction,
//!   energy bookkeeping and dictionary learning,
//! * [`readout`] — activation tuning maps and naïve Bayes inference of
//!   disparity and surface orientation, including scale-space inference on
//!   full scenes,
//! * [`analysis`] — kernel statistics (Gabor fits, ocular dominance, shift
//!   statistics, type classification), error evaluation and the
//!   activity-based error predictor,
//! * [`tensor`] — the little-endian binary tensor container used for every
//!   on-disk artifact, plus JSON sidecar metadata.
//!
//! All numerics are generic over the scalar type through the [`Scalar`]
//! trait; concrete `f32`/`f64` aliases for the main types are exported at
//! the crate root.

pub mod analysis;
pub(crate) mod linalg;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod imagecore;
pub mod lca;
pub mod readout;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{cast, Scalar};

/// Grayscale image with `f32` samples.
pub type ImageF32 = imagecore::Image<f32>;
/// Grayscale image with `f64` samples.
pub type ImageF64 = imagecore::Image<f64>;
/// Stereo pair with `f32` samples.
pub type StereoPairF32 = imagecore::StereoPair<f32>;
/// Stereo pair with `f64` samples.
pub type StereoPairF64 = imagecore::StereoPair<f64>;
/// Binocular dictionary with `f32` weights.
pub type DictionaryF32 = lca::Dictionary<f32>;
/// Binocular dictionary with `f64` weights.
pub type DictionaryF64 = lca::Dictionary<f64>;
/// LCA code state with `f32` coefficients.
pub type CodeStateF32 = lca::CodeState<f32>;
/// LCA code state with `f64` coefficients.
pub type CodeStateF64 = lca::CodeState<f64>;
/// Tuning maps with `f32` probabilities.
pub type TuningMapsF32 = readout::TuningMaps<f32>;
/// Tuning maps with `f64` probabilities.
pub type TuningMapsF64 = readout::TuningMaps<f64>;
