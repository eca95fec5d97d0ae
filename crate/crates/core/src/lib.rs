pub mod error;
pub mod rng;
pub mod sphere;
pub mod prior;
pub mod phantom;
pub mod field;
pub mod dataset;
pub mod blob;
pub mod estimator;
pub mod hyperopt;
pub mod shls;
pub mod downstream;
pub mod harness;
