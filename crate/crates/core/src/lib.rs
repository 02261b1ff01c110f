//! Simulation and analysis of satellite-to-ground entanglement distribution.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod estimators;
pub mod eventsim;
pub mod geometry;
pub mod linkbudget;
pub mod quantum;
pub mod rng;
pub mod scenario;
pub mod spacetime;
pub mod timesync;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/link-budget.md")]
    mod link_budget {}
    #[doc = include_str!("../../../book/src/quantum.md")]
    mod quantum {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/timesync.md")]
    mod timesync {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/spacetime.md")]
    mod spacetime {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
