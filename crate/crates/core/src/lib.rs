// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_model;
pub mod error;
pub mod gibbs;
pub mod linalg;
pub mod risk_model;
pub mod rng;
pub mod state_space;
pub mod synthetic;
pub mod trial_sim;

pub use error::{Error, Result};

/// Guide snippets, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data-model.md")]
    mod data_model {}
    #[doc = include_str!("../../../book/src/state-space.md")]
    mod state_space {}
    #[doc = include_str!("../../../book/src/gibbs.md")]
    mod gibbs {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/risk-model.md")]
    mod risk_model {}
    #[doc = include_str!("../../../book/src/trial-simulation.md")]
    mod trial_simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
}
