//! Numerical engine for multi-scale KAM iteration on lower-dimensional
//! invariant tori.
//!
//! The crate is organized around the objects the iteration manipulates:
//!
//! - [`tfseries`]: truncated Taylor-Fourier series arithmetic (brackets,
//!   truncation, averages, majorant norms, serialization);
//! - [`mslinalg`]: small-divisor operators, their multi-scale eigenvalue
//!   floors, and Weyl-type perturbation transfer;
//! - [`homological`]: the degree-graded homological solves for the
//!   generating Hamiltonian and the translation equations;
//! - [`kamstep`]: one full KAM step (truncate, solve, Lie transform,
//!   translate, reassemble) plus the high-order preprocessing stage;
//! - [`scheduler`]: iteration sequences, assumption checks, and the driver
//!   loop;
//! - [`nonres`]: nonresonant parameter sets, nondegeneracy condition
//!   checks, and excluded-measure estimation;
//! - [`resonance`]: resonant-lattice detection, unimodular completion, and
//!   the reduction of a resonant Hamiltonian to normal form;
//! - [`cli`]: batch configuration, presets and artifact output.

pub mod cli;
pub mod error;
pub mod homological;
pub mod kamstep;
pub mod mslinalg;
pub mod nonres;
pub mod resonance;
pub mod scheduler;
pub mod tfseries;

pub use error::{EngineError, Result};
pub use tfseries::{AnalyticDomain, Dims, LambdaBox, MultiIndex, TFSeries, C64};
