//! Identification of a single module in a linear dynamic network.
//!
//! The target module keeps a rational parameterization while the other
//! filters of its node equation get stable spline Gaussian-process priors.
//! Parameters and hyperparameters are estimated jointly by EM on the marginal
//! likelihood, see [`ebdm::identify`]. [`nonparam`] drops the
//! parameterization altogether and [`baseline`] fits the full MISO
//! Box–Jenkins model for comparison.

pub mod baseline;
pub mod ebdm;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod nonparam;
pub mod poly;
pub mod regression;
pub mod start;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/predictor.md")]
    mod predictor {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/em.md")]
    mod em {}
    #[doc = include_str!("../../../book/src/nonparametric.md")]
    mod nonparametric {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/montecarlo.md")]
    mod montecarlo {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
