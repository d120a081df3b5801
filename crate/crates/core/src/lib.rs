//! Probe-based environment impedance estimation and adaptive admittance
//! force control, simulated end to end.
//!
//! * [`contact`] environment force laws and stiffness fields
//! * [`signal`] FIR design, streaming filters and delay lines
//! * [`probe`] the stiffness-probing excitation and its measurement path
//! * [`estimator`] bilinear regressor, RLS with adaptive forgetting, batch LS
//! * [`control`] PI force loop, admittance mapping, inner loop, joint increments
//! * [`stability`] transfer functions, Padé delay, Bode and margins
//! * [`sim`] fixed-step scenarios, traces and metrics

pub mod contact;
pub mod control;
pub mod error;
pub mod estimator;
pub mod probe;
pub mod signal;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
