pub mod adversary;
pub mod checkpoint;
pub mod cvae;
pub mod data;
pub mod flow;
pub mod invariance;
pub mod metrics;
pub mod pipeline;
