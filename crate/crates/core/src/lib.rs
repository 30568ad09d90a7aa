//! Valuation and optimal operation of an energy storage facility when the
//! price follows a mean-reverting process whose level switches between hidden
//! regimes.
//!
//! The pieces, in pipeline order:
//!
//! * [`model`]: parameters, rewards, rate envelope.
//! * [`filter`]: Wonham filter and truth-mode simulation.
//! * [`hjb`]: backward solve of the dynamic programming equation on a 4-D grid.
//! * [`barriers`]: switching levels, smoothing and admissibility checks.
//! * [`transform`]: simulation of SDEs whose drift jumps across a surface.
//! * [`evaluate`]: Monte Carlo value of the threshold policy.
//! * [`config`] and [`pipeline`]: run configuration and artifact writing for the CLI.

pub mod barriers;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod filter;
pub mod hjb;
pub mod model;
pub mod pipeline;
pub mod rng;
#[cfg(test)]
mod testing;
pub mod transform;

pub use error::{ConfigError, EvalError, ParamError, PipelineError};
pub use model::{ModelParams, PAPER_PRESET};
