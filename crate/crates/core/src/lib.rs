//! Design comparison for two-arm randomized experiments by tail quantiles of
//! the squared estimation error. See the guide in `book/` for a walkthrough.

pub mod designs;
pub mod matching;
pub mod response;
pub mod criteria;
pub mod montecarlo;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod rng;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
pub use types::{Allocation, Blocking, CovariateMatrix, DesignCovariance, OutcomePair};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/criteria.md")]
    mod criteria {}
    #[doc = include_str!("../../../book/src/designs.md")]
    mod designs {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/responses.md")]
    mod responses {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
