//! Scenario and report files.

use std::fs;
use std::path::Path;

use cachepeer_core::config::ScenarioConfig;
use cachepeer_core::report::{DeltaReport, MetricsReport};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

/// Parses JSON text, reporting the offending field path and position.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    match serde_path_to_error::deserialize(de) {
        Ok(v) => Ok(v),
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let at = format!("line {}, column {}", inner.line(), inner.column());
            if path.is_empty() || path == "." {
                Err(format!("{at}: {inner}"))
            } else {
                Err(format!("field `{path}` ({at}): {inner}"))
            }
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Reads a scenario file. Malformed files are configuration errors.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = read(path)?;
    parse_json(&text).map_err(|m| CliError::Config(format!("{}: {m}", path.display())))
}

pub fn load_report(path: &Path) -> Result<MetricsReport, CliError> {
    let text = read(path)?;
    parse_json(&text).map_err(|m| CliError::parse(path, m))
}

pub fn load_delta(path: &Path) -> Result<DeltaReport, CliError> {
    let text = read(path)?;
    parse_json(&text).map_err(|m| CliError::parse(path, m))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
