//! Joint intensity and depth analysis operators: learning on the oblique
//! manifold, guided depth super-resolution and inpainting, image I/O and metrics.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`.

// `!(x > 0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod imaging;
pub mod jido;
pub mod learning;
pub mod manifold;
pub mod operator;
pub mod plane;
pub mod reconstruction;
pub mod scalar;

pub use error::{Error, ErrorKind, Result};
pub use imaging::{DepthMap, GrayImage, Interpolation};
pub use learning::{LearnConfig, RegisteredPair};
pub use manifold::{CgConfig, StopReason};
pub use reconstruction::{FidelityKind, FidelityTerm, SolveConfig};
pub use scalar::Real;

pub type Operator = operator::AnalysisOperator<f64>;
pub type Pair = operator::OperatorPair<f64>;
pub type Image = plane::Plane<f64>;
pub type Coefficients = operator::CoefficientStack<f64>;
pub type Patches = learning::TrainingSet<f64>;
pub type Oblique = manifold::ObliquePoint<f64>;
pub type Measurement = reconstruction::MeasurementModel<f64>;

pub type OperatorF32 = operator::AnalysisOperator<f32>;
pub type PairF32 = operator::OperatorPair<f32>;
pub type ImageF32 = plane::Plane<f32>;
