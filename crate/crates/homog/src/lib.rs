//! Desk-scale numerical toolkit for elliptic homogenization with local
//! defects in a periodic background.
//!
//! The crate builds everything from one staggered finite-difference
//! calculus: periodic cell problems (correctors, effective tensors,
//! invariant measures, skew vector potentials), truncated-box solves for
//! defect parts with `L^q` diagnostics, the algebraic rewrite of
//! non-divergence operators into divergence form, Green-function decay
//! measurements, and two-scale convergence studies. The `runner` module
//! wires these into reproducible, config-driven experiments with CSV and
//! JSON outputs.

pub mod cell;
pub mod coeff;
pub mod defect;
pub mod error;
pub mod fft;
pub mod field;
pub mod fit;
pub mod green;
pub mod grid;
pub mod mg;
pub mod nondiv;
pub mod report;
pub mod runner;
pub mod solver;
pub mod twoscale;

pub use error::{Error, Result};
pub use grid::{GridKind, GridSpec};
