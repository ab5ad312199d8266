//! Physics-informed neural network for inverse advection-diffusion problems.
//!
//! Given sparse space-time concentration samples, the trainer jointly fits an
//! MLP surrogate `C(x, t)`, a diffusion coefficient `D` and an advection
//! velocity `v`, and the physics module classifies the transport regime via
//! the Peclet number.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod autodiff;
pub mod data;
pub mod fdsolver;
pub mod network;
pub mod physics;
pub mod trainer;

pub use autodiff::{Gradients, NodeId, OpKind, Tape, Tensor};
pub use data::{SampleBatch, SamplingConfig, ScaleRecord, SyntheticSpec, TruthManifest, VoxelSeries};
pub use fdsolver::{analytic_gaussian, solve_ade_fd, Boundary, Grid};
pub use network::{DerivBundle, MlpParams};
pub use physics::{classify_regime, peclet, PecletReport, PhysicsParams, Regime, VelocityMode};
pub use trainer::{lr_schedule, predict, train, EpochRow, PinnModel, TrainRecord, TrainingConfig};
