pub mod artifact;
pub mod enhance;
pub mod fixture;
pub mod guidance;
pub mod metrics;
pub mod moe;
pub mod orchestrator;
pub mod testbed;
