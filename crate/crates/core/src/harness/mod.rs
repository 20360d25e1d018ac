//! Config parsing, experiment runners and result emission.

pub mod config;
pub mod experiments;
pub mod output;

pub use config::{parse_config, parse_config_str, ExperimentId, ExperimentSpec, Resolved};
pub use experiments::{generate_mdp, run_experiment, ExperimentOutput, ReplicateDetail};
pub use output::{csv_string, emit_csv, emit_summary, read_csv, summarize, ResultRow, CSV_HEADER};
