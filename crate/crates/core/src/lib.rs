//! Steady-state phase-space quantum transport on a discretized Wigner–Moyal
//! equation with tunable observation windows.

pub mod assembly;
pub mod config;
pub mod error;
pub mod harness;
pub mod observables;
pub mod phasespace;
pub mod solve;
pub mod stencil;

pub use error::{Error, Result};
