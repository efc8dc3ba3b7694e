//! Dynamic regression for multistep spatiotemporal forecasting.
//!
//! A base forecaster maps an `N x P` history to an `N x Q` forecast. Its
//! residuals follow a bilinear seasonal autoregression
//! `R_t = A·R_{t−Δ}·B + E_t` with matrix-normal errors `E_t ~ MN(0, Σ_N, Σ_Q)`,
//! and all parameters are trained jointly.

pub mod cli;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod forecaster;
pub mod io;
pub mod matnorm;
pub mod optim;
pub mod residual_ar;
pub mod training;

pub use datagen::{GroundTruth, SeriesPanel, SynthSpec};
pub use error::{DrError, Result};
pub use forecaster::{ForecasterKind, ForecasterSpec, ParameterVector};
pub use matnorm::{MatrixNormalModel, TriangularFactor};
pub use residual_ar::ArCoefficients;
pub use training::{predict, train, train_base_only, TrainConfig, TrainedModel};
