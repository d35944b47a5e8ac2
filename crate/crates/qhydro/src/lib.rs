//! 1-D stochastic quantum hydrodynamics: harmonic-oscillator eigenstates
//! under thermal noise, Fokker-Planck and path-integral density propagation,
//! Langevin ensembles, and Born-rule relaxation experiments.

pub mod error;
pub mod numerics;
pub mod oscillator;
pub mod params;
pub mod ptf;
pub mod qpotential;
pub mod sde;

pub use error::{QhError, Result};
