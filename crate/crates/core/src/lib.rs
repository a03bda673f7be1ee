//! Total-correlation regularized soft actor-critic.

pub mod autodiff;
pub mod config;
pub mod envs;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objective;
pub mod replay;
pub mod util;
pub mod window;
pub mod rng;
pub mod trainer;

pub use error::{MtcError, Result};
