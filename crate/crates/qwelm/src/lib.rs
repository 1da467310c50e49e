//! Simulation of a photonic quantum extreme learning machine.
//!
//! A fixed linear-optical "reservoir" — a quantum walk on the joint
//! polarization ⊗ orbital-angular-momentum (OAM) space of one or two photons —
//! scatters an input polarization state across many OAM modes.  Mode-resolved
//! photodetection behind a polarization projector then yields a feature vector
//! that is linear in the input density matrix, and a classical linear readout
//! trained by least squares maps those features onto target observables.
//!
//! The crate covers the full pipeline:
//!
//! * [`optics`] — Jones calculus for wave plates, q-plate action on the OAM
//!   register, walk assembly, and post-selected transfer matrices;
//! * [`photon`] — exact outcome statistics for coherent, single-photon and
//!   two-photon inputs, plus shot-noise and intensity-noise models;
//! * [`qelm`] — feature extraction, pseudoinverse ridge/least-squares
//!   training of the readout, and standard qubit observables;
//! * [`optimize`] — model-free tuning of the measurement projection angles by
//!   finite-difference coordinate descent on a hardware-style angle grid;
//! * [`experiments`] — end-to-end training/evaluation tasks, Monte-Carlo
//!   uncertainty estimates, and noise-robustness scans;
//! * [`config`] / [`report`] — declarative TOML run descriptions and
//!   deterministic CSV/JSON outputs.

pub mod config;
pub mod error;
pub mod experiments;
pub mod optics;
pub mod optimize;
pub mod photon;
pub mod qelm;
pub mod report;

pub use error::QelmError;

/// The deterministic random-number generator used throughout the crate.
///
/// Every stochastic routine takes one of these explicitly, so a run is fully
/// reproducible from its seed.
pub type SimRng = rand_chacha::ChaCha12Rng;
