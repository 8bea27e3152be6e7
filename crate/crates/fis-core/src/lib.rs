//! Influence-guided data sampling for training fair classifiers.
//!
//! The library covers the full experimental loop: dataset handling with a
//! label-budgeted pool ([`data`]), a small feed-forward classifier with
//! per-example gradients ([`model`]), group fairness metrics and their
//! differentiable surrogates ([`fairness`]), first-order influence scores
//! with an exact one-step oracle ([`influence`]), the sampling loop and
//! reference baselines ([`sampling`]), and empirical checks of the
//! generalization and disparity bounds ([`bounds`]).
//!
//! All numeric kernels are generic over the scalar type through
//! [`Scalar`]; `f64` aliases for the main types live at the crate root.

pub mod bounds;
pub mod data;
pub mod fairness;
pub mod influence;
pub mod model;
pub mod sampling;
pub mod seed;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric kernels are generic over.
///
/// Implemented for `f32` and `f64`. Randomness is always drawn as `f64`
/// and converted, so both instantiations consume identical RNG streams.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` for constants and RNG draws.
    fn from_f64_lossy(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 converts to any scalar")
    }

    /// Conversion to `f64` for reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Conversion from a count.
    fn from_usize_lossy(value: usize) -> Self {
        Self::from_usize(value).expect("count converts to any scalar")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Default
        + fmt::Debug
        + fmt::Display
        + Send
        + Sync
        + 'static
{
}

/// Dataset over `f64` features.
pub type Dataset64 = data::Dataset<f64>;
/// Dataset over `f32` features.
pub type Dataset32 = data::Dataset<f32>;
/// Train/pool/validation/test bundle over `f64`.
pub type SplitBundle64 = data::SplitBundle<f64>;
/// Component mixture over `f64`.
pub type ComponentMixture64 = data::ComponentMixture<f64>;
/// Classifier state over `f64` parameters.
pub type ModelState64 = model::ModelState<f64>;
/// Classifier state over `f32` parameters.
pub type ModelState32 = model::ModelState<f32>;
