//! Simulation and analysis of spin-path entangled neutron beams.
//!
//! A neutron passing through an entangler (a magnetic Wollaston prism pair or
//! a radio-frequency flipper quartet) leaves in a state where its spin and
//! path degrees of freedom are entangled. This crate models that state
//! exactly as a two-qubit density operator, converts instrument settings
//! (coil fields, quartz block angles, flipper frequencies) into spin and path
//! phases, generates synthetic detector counts, and runs the full extraction
//! pipeline: cosine fits, expectation values, the CHSH contextuality witness
//! `S`, and Monte Carlo counting-statistics uncertainties.
//!
//! Modules map onto the stages of an experiment:
//!
//! - [`quantum`] — exact 4x4 density-operator states, observables, and the
//!   analytic witness; the ground truth everything else is checked against.
//! - [`devices`] — closed-form device formulas: path/spin phases,
//!   entanglement length, RF focusing conditions.
//! - [`coherence`] — beam coherence lengths, longitudinal wavepacket
//!   separation profiles, overlap-regime classification.
//! - [`beamline`] — device composition, the intensity model, and synthetic
//!   scan datasets with Poisson counting noise.
//! - [`analysis`] — curve fitting and witness extraction from count data.
//! - [`config`] — the on-disk experiment configuration schema.

pub mod analysis;
pub mod beamline;
pub mod coherence;
pub mod config;
pub mod devices;
pub mod quantum;
