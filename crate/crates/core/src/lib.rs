//! Water/fat separation for multi-echo gradient-echo MRI.
//!
//! Four reconstruction routes share one signal model ([`model`]):
//!
//! * [`ideal`]: classical T2*-IDEAL with zero or in-phase initialization,
//! * supervised network training against reference maps ([`network::train_std`]),
//! * unsupervised training with the signal model as the loss ([`network::train_utd`]),
//! * per-dataset optimisation of an untrained network ([`network::ntd_reconstruct`]).
//!
//! The networks run on a small reverse-mode differentiation engine
//! ([`autodiff`]). [`phantom`] generates ground truth and [`eval`] provides the
//! fat-fraction, ROI and correlation measurements used to compare routes.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod ideal;
pub mod manifest;
pub mod model;
pub mod network;
pub mod pgm;
pub mod phantom;
pub mod pipeline;
pub mod wfv;

pub use error::{Error, Result};
