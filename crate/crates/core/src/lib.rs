//! Backward problem for a time-fractional fourth-order parabolic equation on
//! boxes: recover u(·, 0) from u(·, τ) and the source, in the Dirichlet
//! eigenbasis.

pub mod constants;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod inverse;
pub mod mittag_leffler;
pub mod quadrature;
pub mod regularization;
pub mod special;
pub mod spectral;
pub mod summation;

pub use error::{Error, Result};
