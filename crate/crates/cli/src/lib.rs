//! Drivers behind the `swattn` command: the correctness suite, counted-work
//! benchmarks, selection-quality reports and fixture generation.

pub mod bench;
pub mod check;
pub mod error;
pub mod fixtures;
pub mod quality;

pub use bench::{run_bench, BenchMode, BenchOptions, BenchRecord, BenchReport};
pub use check::{run_correctness, CheckRecord, CorrectnessReport, Perturbation};
pub use error::{exit, CliError, CliResult};
pub use fixtures::{gen_fixtures, FixtureManifest};
pub use quality::{quality_config, run_selection_quality, QualityOptions, QualityReport};

use std::path::Path;

use swattn::{validate_config, AttentionConfig};

/// Read a JSON config whose keys are the short symbol names (`h_q`, `B`,
/// `N_local`, ...) and validate it.
pub fn load_config(path: &Path) -> CliResult<AttentionConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::ConfigFile(format!("{}: {e}", path.display())))?;
    let cfg: AttentionConfig =
        serde_json::from_str(&text).map_err(|e| CliError::ConfigFile(format!("{}: {e}", path.display())))?;
    Ok(validate_config(cfg)?)
}

/// Parse a comma-separated list; an empty string is an empty list.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| CliError::Usage(format!("cannot parse list item `{x}`"))))
        .collect()
}
