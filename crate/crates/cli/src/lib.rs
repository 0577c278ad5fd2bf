pub mod ablate;
pub mod config;
pub mod error;
pub mod runner;
pub mod simulate;
pub mod svg;

pub use config::RunConfig;
pub use error::{CliError, Result};
