pub mod classifier;
pub mod orchestrator;
pub mod pipeline;
pub mod report;
pub mod sim;
pub mod stats;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/blueprints.md")]
    mod blueprints {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
}
