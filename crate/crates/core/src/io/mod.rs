//! File formats: IDX datasets, model and program binaries, experiment config.

pub mod config;
pub mod idx;
pub mod persist;

pub use config::ExperimentConfig;
pub use idx::{load_idx, load_mnist};
pub use persist::{load_model, load_program, save_model, save_program};
