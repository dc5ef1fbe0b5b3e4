//! Experiment orchestration: configuration, the round loop, metrics output
//! and the command-line front end.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod run;

pub use config::{parse_override, DataConfig, ExperimentConfig, MetricsFormat, ModelConfig, ProxyConfig, OUT_DIR_ENV};
pub use metrics::{read_json, write_csv, write_metrics, CSV_COLUMNS};
pub use run::{load_data, mean_clients_per_round, mean_malicious_coefficient, prepare, run, run_prepared, Environment, RoundRecord, RunOutput};
