//! Machine design of fast two-qubit gates for linear trapped-ion chains.
//!
//! Gates are built from anti-symmetric sequences of state-dependent kicks
//! (SDKs). The crate is organised bottom-up:
//!
//! * [`chain`]: trap potentials, equilibrium crystals, normal modes,
//!   Lamb-Dicke parameters and thermal occupations.
//! * [`kicks`]: pulse-group sequences, their expansion at a finite
//!   repetition rate, and closed-form gate metrics.
//! * [`phasespace`]: an independent piecewise trajectory model used to
//!   cross-check the closed forms.
//! * [`optimize`]: the two-stage (integer, then timing) sequence search.
//! * [`robustness`]: Monte-Carlo pulse errors, timing and frequency scans,
//!   diffraction populations.

pub mod chain;
pub mod error;
pub mod kicks;
pub mod optimize;
pub mod phasespace;
pub mod robustness;

mod linalg;

pub use error::{Error, Result};
