//! Stability analysis for transformer layers under the block-∞/RMS norm:
//! softmax sensitivity, LayerNorm and attention Lipschitz bounds, layer
//! Jacobians, depth scaling and per-layer diagnostics.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod blocks;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod normlayer;
pub mod scaling;
pub mod sensitivity;

pub use attention::{HeadWeights, MhaBoundBreakdown, MhaWeights};
pub use blocks::{Arch, GradientProbeResult, LayerWeights, ModelConfig, ModelWeights};
pub use error::{Result, StabilityError};
pub use linalg::{block_inf_rms_norm, spectral_norm, Matrix, Rng};
pub use metrics::SensitivityRecord;
pub use normlayer::LayerNormParams;
pub use scaling::{Convention, ScalingRecommendation};
pub use sensitivity::{ProbDist, ThetaMethod, ThetaResult};
