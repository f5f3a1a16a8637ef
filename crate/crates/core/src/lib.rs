//! Semiclassical stochastic electrodynamics for two-level atoms in a
//! single-mode optical cavity.
//!
//! The cavity field is adiabatically eliminated, leaving per-realization
//! equations for the atomic coherences and populations. Ensembles of discrete
//! atomic positions are sampled from the quantum-phase-dependent joint
//! distribution (Mott insulator or independent/BEC), solved one realization at
//! a time, and averaged. An exact two-atom correlation-function hierarchy
//! solver ([`oracle2`]) provides ground truth for validating the semiclassical
//! engine.
//!
//! Internal unit conventions: frequencies in units of the cavity linewidth
//! `kappa`, lengths in units of the cavity wavelength `lambda`.

pub mod dynamics;
pub mod model;
pub mod modes;
pub mod observables;
pub mod oracle2;
pub mod sampling;

pub use dynamics::{AtomState, LinearSystem, SaturatedSteadyState};
pub use model::{DetuningProfile, LatticeConfig, ModeKind, SystemParams, TransversePump};
pub use sampling::{Realization, SamplerKind};

/// Complex double, the numeric workhorse type.
pub type C64 = num_complex::Complex64;

pub(crate) const IM: C64 = C64::new(0.0, 1.0);
