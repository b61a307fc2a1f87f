//! Batch elutriation through inclined laminar channels.
//!
//! The forward model maps a feed size distribution to the masses collected
//! in successive overflow bags while the superficial velocity ramps up. The
//! inverse model recovers the feed from bag masses by non-negative,
//! mass-constrained, Tikhonov-regularized least squares on a spline basis.

pub mod error;
pub mod feed;
pub mod forward;
pub mod inverse;
pub mod physics;
pub mod qp;
pub mod quadrature;

pub use error::{Error, Result};
