//! Variational Bayes adaptation of simplified PLDA from labelled and
//! unlabelled i-vectors.

pub mod bayes;
pub mod control;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod point;
pub mod special;
pub mod synth;

pub use error::{Result, SpldaError};
pub use model::{Dataset, SpldaModel, SuffStats};
