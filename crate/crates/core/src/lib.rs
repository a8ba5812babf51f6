//! Multivariate change-of-support analysis with Karhunen–Loève expansions.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod bayes;
pub mod cage;
pub mod covariance;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kle;
pub mod linalg;
pub mod regionalize;
pub mod stats;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/covariance.md")]
    mod covariance {}
    #[doc = include_str!("../../../book/src/kle.md")]
    mod kle {}
    #[doc = include_str!("../../../book/src/cage.md")]
    mod cage {}
    #[doc = include_str!("../../../book/src/bayes.md")]
    mod bayes {}
    #[doc = include_str!("../../../book/src/regionalization.md")]
    mod regionalization {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
