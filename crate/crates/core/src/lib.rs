pub mod archive;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
