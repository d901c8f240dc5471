//! Configuration, CSV input, the filtering driver and report output behind
//! the `dglm` binary.

pub mod config;
pub mod csvio;
pub mod driver;
pub mod error;
pub mod report;

pub use config::RunConfig;
pub use csvio::parse_csv;
pub use driver::{run_filter, run_pmmh, run_simulation, RunReport};
pub use error::CliError;
pub use report::emit_report;
