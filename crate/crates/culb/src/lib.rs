//! Files, parallel evaluation and the command-line driver for `culb-core`.
//!
//! Artifacts of one experiment live under its output directory:
//!
//! ```text
//! world.culb                 world + classifiers
//! base.culb                  θ† with its gate report
//! runs/<strategy>-<addons>/  metrics.csv, drift_heatmap.csv, runlog.json, checkpoints/
//! analysis/                  smoothness.csv, taylor_report.json, similarity_retention.csv, kv_shift.csv
//! ```

pub mod cli;
pub mod container;
pub mod error;
pub mod io;
pub mod labeler;
pub mod pipeline;

pub use error::{CliError, Result};
