//! Configuration, training, embedding persistence, evaluation and the method
//! grid behind the `aurora` CLI.

pub mod config;
pub mod eval;
pub mod grid;
pub mod store;
pub mod train;

pub use config::{ExperimentConfig, Method};
pub use eval::{evaluate, evaluate_shifted, Evaluation};
pub use grid::{run_grid, GridResult};
pub use store::{embed, read_store, write_store};
pub use train::{train, train_on, write_log_csv, TrainOutcome};
