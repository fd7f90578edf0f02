//! Skill ratings, a synthetic MOBA world and a sequence model that predicts a
//! new player's converged MMR from their first games.

pub mod datasets;
pub mod kernels;
pub mod metrics;
pub mod mmrnet;
pub mod oracle;
pub mod pipeline;
pub mod rating;
pub mod scalar;
pub mod simworld;

pub use scalar::Scalar;

/// Double-precision rating belief.
pub type Rating64 = rating::Rating<f64>;
pub type RatingConfig64 = rating::RatingConfig<f64>;
pub type Tensor64 = kernels::Tensor<f64>;
pub type Model64 = mmrnet::Model<f64>;
pub type Model32 = mmrnet::Model<f32>;
