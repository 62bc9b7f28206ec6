//! Config-driven experiment runner built on `sicthermo`.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod registry;

use config::{parse_raw, ExperimentConfig};
use error::Result;
use registry::{ExperimentRegistry, Overrides};

/// Parses `text` and applies the defaults of the experiment it names.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let reg = ExperimentRegistry::with_builtins();
    Ok(reg.prepare(parse_raw(text)?, None, &Overrides::default())?.config)
}
