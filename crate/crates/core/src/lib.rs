//! Conformalized deep uncertainty for sequence predictors under
//! non-exchangeable data.
//!
//! The crate is organised bottom-up:
//!
//! - [`mathcore`]: dense tensors, tape-based reverse-mode differentiation,
//!   Adam, deterministic random streams and the JSON checkpoint format.
//! - [`synth`]: synthetic episode streams (exchangeable or changepoint-shifted).
//! - [`model`]: a two-stage global/local sequence estimator with random frame
//!   masking.
//! - [`duf`]: the learned nonconformity scorer and its adversarial losses.
//! - [`conformal`]: weighted calibration, prediction sets and coverage.
//! - [`bounds`]: miscoverage-gap bounds and their quadrature oracles.
//! - [`pipeline`]: training, evaluation, ablations and coverage experiments.

pub mod bounds;
pub mod conformal;
pub mod duf;
pub mod error;
pub mod mathcore;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
