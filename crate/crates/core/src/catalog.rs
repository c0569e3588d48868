//! Scenario lookup: bundled desks, a search directory, or a file path.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{validate_scenario, Scenario};

const BUNDLED: [(&str, &str); 3] = [
    ("desk-1", include_str!("../scenarios/desk-1.json")),
    ("desk-2", include_str!("../scenarios/desk-2.json")),
    ("desk-3", include_str!("../scenarios/desk-3.json")),
];

/// Environment variable naming the default scenario search directory.
pub const SCENARIO_DIR_ENV: &str = "PILOT_SCENARIO_DIR";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("scenario {0:?} not found")]
    NotFound(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{name}: invalid scenario JSON: {source}")]
    Parse {
        name: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{name}: {violations}")]
    Invalid { name: String, violations: String },
}

/// The three default scenarios, one per negotiation.
pub fn bundled() -> Vec<Scenario> {
    BUNDLED
        .iter()
        .map(|(_, text)| Scenario::from_json(text).expect("bundled scenarios parse"))
        .collect()
}

pub fn bundled_named(name: &str) -> Option<Scenario> {
    let name = name.strip_suffix(".json").unwrap_or(name);
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_json(text).expect("bundled scenarios parse"))
}

pub fn load_file(path: &Path) -> Result<Scenario, CatalogError> {
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_owned(),
        source,
    })?;
    Scenario::from_json(&text).map_err(|source| CatalogError::Parse {
        name: path.display().to_string(),
        source,
    })
}

/// Finds `name` as a path, then as `<dir>/<name>[.json]`, then among the bundled desks.
pub fn resolve(name: &str, dir: Option<&Path>) -> Result<Scenario, CatalogError> {
    let direct = Path::new(name);
    if direct.is_file() {
        return load_file(direct);
    }
    if let Some(dir) = dir {
        for candidate in [dir.join(name), dir.join(format!("{name}.json"))] {
            if candidate.is_file() {
                return load_file(&candidate);
            }
        }
    }
    bundled_named(name).ok_or_else(|| CatalogError::NotFound(name.to_owned()))
}

/// Directory from the environment, if set.
pub fn env_dir() -> Option<PathBuf> {
    std::env::var_os(SCENARIO_DIR_ENV).map(PathBuf::from)
}

/// Rejects scenarios with any violation, naming each one.
pub fn check(scenario: &Scenario) -> Result<(), CatalogError> {
    let violations = validate_scenario(scenario);
    if violations.is_empty() {
        return Ok(());
    }
    Err(CatalogError::Invalid {
        name: scenario.name.clone(),
        violations: violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
    })
}

/// One scenario stands for all three negotiations; three are used in order.
pub fn expand(scenarios: Vec<Scenario>) -> Option<Vec<Scenario>> {
    match scenarios.len() {
        0 => Some(bundled()),
        1 => Some(vec![scenarios[0].clone(), scenarios[0].clone(), scenarios[0].clone()]),
        3 => Some(scenarios),
        _ => None,
    }
}
