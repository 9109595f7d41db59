//! Large-deviation thermodynamics of photon counting from a driven two-level
//! emitter whose parameters are modulated by a classical Markovian bath.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] defines the emitter, the drive and the bath process.
//! * [`liouville`] builds the tilted generator and extracts the grand
//!   potential, cumulants and s-ensemble bath populations from its spectrum.
//! * [`analytic`] holds closed forms and the fast- and slow-modulation limits.
//! * [`counting`] integrates the finite-time counting statistics.
//! * [`trajectory`] samples quantum-jump trajectories by Monte Carlo.

pub mod analytic;
pub mod counting;
pub mod error;
pub mod liouville;
pub mod model;
pub mod numeric;
pub mod trajectory;

pub use error::{Error, Result};
pub use model::{BathProcess, DriveParams, LevelParams, ModelConfig, ModulatedFluorophore};
