//! KeenKT: knowledge tracing with Normal-Inverse-Gaussian knowledge states.
//!
//! The pipeline is encoder → disambiguator → predictor, all built on the
//! in-crate reverse-mode engine in [`autodiff`]. [`data`] handles ingestion
//! and simulation; [`train`] owns the loop, metrics and checkpoints.

pub mod autodiff;
pub mod data;
pub mod disambiguator;
pub mod encoder;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nig;
pub mod predictor;
pub mod train;
