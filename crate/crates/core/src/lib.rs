//! Expectation alignment maps and the multi-scale consistency losses built on them.
//!
//! The math is generic over [`Real`] (`f32` or `f64`). The aliases at the crate
//! root fix the scalar to `f64`, which is what the tolerances in the tests assume;
//! the `*F32` aliases cover the single-precision path.
//!
//! Module map:
//!
//! * [`eah`]: token similarity, token posterior, expectation map;
//! * [`fusion`]: pyramid down/up fusion;
//! * [`sem_loss`]: top-K pooling and multi-positive InfoNCE;
//! * [`geo_loss`]: the geometry-aware consistency objective;
//! * [`variational`]: free energy, Gibbs minimizer, mirror descent;
//! * [`mil`]: multiple-instance formulation;
//! * [`gradients`]: combined objective, reverse pass, finite differences;
//! * [`synth`]: synthetic scenes and the training demo.

pub mod eah;
pub mod error;
pub mod fusion;
pub mod geo_loss;
pub mod gradients;
pub mod mil;
pub mod scalar;
pub mod sem_loss;
pub mod synth;
pub mod variational;

pub use error::{Error, Result};
pub use scalar::Real;

pub use geo_loss::{InstanceMaskSet, StdVariant};
pub use sem_loss::{PromptLabels, TopKSelection};

pub type FeatureMap = eah::FeatureMap<f64>;
pub type TokenBatch = eah::TokenBatch<f64>;
pub type SimilarityTensor = eah::SimilarityTensor<f64>;
pub type TokenPosterior = eah::TokenPosterior<f64>;
pub type AlignmentMap = eah::AlignmentMap<f64>;
pub type ScalePyramid = fusion::ScalePyramid<f64>;
pub type PooledLogits = sem_loss::PooledLogits<f64>;
pub type PairDistribution = geo_loss::PairDistribution<f64>;
pub type AdvantageField = geo_loss::AdvantageField<f64>;
pub type GacoConfig = geo_loss::GacoConfig<f64>;
pub type GibbsProblem = variational::GibbsProblem<f64>;
pub type SimplexDistribution = variational::SimplexDistribution<f64>;
pub type InstanceBag = mil::InstanceBag<f64>;
pub type AlignmentSample = gradients::AlignmentSample<f64>;
pub type ObjectiveConfig = gradients::ObjectiveConfig<f64>;
pub type LossBreakdown = gradients::LossBreakdown<f64>;
pub type GradientBundle = gradients::GradientBundle<f64>;
pub type DemoReport = synth::DemoReport<f64>;
pub type DemoConfig = synth::DemoConfig<f64>;
pub use synth::{Rect, SceneSpec};

pub type FeatureMapF32 = eah::FeatureMap<f32>;
pub type TokenBatchF32 = eah::TokenBatch<f32>;
pub type AlignmentMapF32 = eah::AlignmentMap<f32>;
pub type AlignmentSampleF32 = gradients::AlignmentSample<f32>;
pub type ObjectiveConfigF32 = gradients::ObjectiveConfig<f32>;
pub type GibbsProblemF32 = variational::GibbsProblem<f32>;
