//! Physics-informed generator/encoder adversarial training with latent-space
//! MMD matching, for the stochastic elliptic problem
//! `-(1/10) d/dx[k(x;ω) du/dx] = f(x;ω)` on `[-1, 1]`.

pub mod config;
pub mod diff;
pub mod error;
pub mod evalsuite;
pub mod nets;
pub mod objectives;
pub mod physics;
pub mod stochgen;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
