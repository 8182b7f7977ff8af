#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Variational state estimation: a recurrent network learns a closed-form
//! Gaussian filtering posterior from measurement-only data, using a second
//! recurrent prior network during training.

pub mod camera;
pub mod datasets;
pub mod error;
pub mod evalkit;
pub mod lorenz;
pub mod mathcore;
pub mod measurement;
pub mod nn;
pub mod particle_filter;
pub mod vse;

pub use error::{Result, VseError};
