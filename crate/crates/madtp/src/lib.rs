//! Alignment-guided dynamic token pruning for a compact dual-branch
//! vision-language transformer.
//!
//! The engine scores every token from three attention signals (class
//! attention, self attention received, and cross-modal token attention from
//! a shared learnable bank), derives a per-instance threshold by pushing the
//! temperature-scaled guidance maps through sparsemax, prunes strictly below
//! the threshold with an importance-weighted merged replacement token, and
//! reconciles kept counts across a batch. A compute model and a temperature
//! controller steer the measured cost toward a target reduction ratio, and
//! the harness adds synthetic planted-concept data, a static-pruning
//! baseline, attention-dump replay, toy alignment training, and
//! reproducible reports.

pub mod budget;
pub mod dtp;
pub mod error;
pub mod harness;
pub mod mag;
pub mod numerics;
pub mod tape;
pub mod vlt;

pub use error::{MadtpError, Result};
