pub mod ablation;
pub mod cli;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod world;
