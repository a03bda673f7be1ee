//! Learnable models and Gaussian distribution utilities.

pub mod gaussian;
pub mod layers;
pub mod models;

pub use gaussian::{kl_diag_gaussian, DiagGaussian, GaussianVars, LOG_STD_MAX, LOG_STD_MIN};
pub use layers::{Bind, LayerNorm, Linear, LstmCell, LstmState, Mlp};
pub use models::{
    soft_update, Architecture, Encoder, HistoryModel, ModelSet, OneStepDynamics, OutputNorm, Policy, QNet,
    Representation,
};
