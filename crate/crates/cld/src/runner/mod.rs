//! Configuration, the training loop, evaluation, grid search, and the
//! gradient-check oracle.

pub mod config;
pub mod gradcheck;
pub mod grid;
pub mod optim;
pub mod train;

pub use config::{load_config, parse_config, ClusterMethod, Config, DataSource, OptimConfig, Schedule};
pub use gradcheck::{gradient_check, GradCheckReport, GRADCHECK_FAIL_THRESHOLD};
pub use grid::{grid_search, rankings_by_knn_csv, rankings_csv, GridCell, GridSpec};
pub use optim::{lr_at, sgd_step, OptState};
pub use train::{embed_all, evaluate, resolve_dataset, train, train_on, TrainLog, TrainOutput};
