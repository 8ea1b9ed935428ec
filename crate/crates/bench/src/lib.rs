//! Fixtures shared by the criterion benchmarks under `benches/`.

use std::path::PathBuf;

use capdma_core::Scenario;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

/// Loads a shipped scenario; panics if it is missing or malformed.
pub fn shipped(name: &str) -> Scenario {
    Scenario::from_path(scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}
