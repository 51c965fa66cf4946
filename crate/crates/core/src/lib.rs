//! Choosing treatment fractions from experimental data when outcomes
//! depend on how many others are treated.
//!
//! The crate covers the empirical success rules ([`estimators`]), their
//! finite-sample welfare and regret bounds ([`bounds`]), saturation designs
//! and sample-size planning ([`design`]), and seeded simulation for checking
//! all of it ([`montecarlo`]). [`model`] holds the shared types.
//!
//! ```
//! use regret_design::bounds::{uniform_regret_mes, NoisePrecision};
//!
//! // Two arms treated at fractions 0 and 1, with 50 people each.
//! let a = NoisePrecision::scalar(vec![1.0 / 50.0, 1.0 / 50.0]).unwrap();
//! let bound = uniform_regret_mes(&a).unwrap();
//! assert!((bound.value - 0.5 * (-0.5f64).exp() * (2.0f64 / 50.0).sqrt()).abs() < 1e-15);
//! ```

pub mod bounds;
pub mod commands;
pub mod design;
pub mod error;
pub mod estimators;
pub mod io;
pub mod model;
pub mod montecarlo;

pub use error::{Error, Result};

/// Runs the guide's code blocks as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/welfare.md")]
    struct Welfare;
    #[doc = include_str!("../../../book/src/decision-rules.md")]
    struct DecisionRules;
    #[doc = include_str!("../../../book/src/bounds.md")]
    struct Bounds;
    #[doc = include_str!("../../../book/src/design.md")]
    struct Design;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
