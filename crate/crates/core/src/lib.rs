//! Latent-density probabilistic segmentation with an optimal-transport latent
//! constraint, together with the machinery needed to evaluate it: a small
//! reverse-mode autodiff engine, log-domain Sinkhorn, an exact assignment
//! solver, distribution-level segmentation metrics and latent-space
//! diagnostics.

pub mod assignment;
pub mod autodiff;
pub mod cli;
pub mod densities;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ot;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
