pub mod ablation;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod exec;
pub mod frame;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod segment;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
