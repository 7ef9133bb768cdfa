//! Scenario files (TOML) and trace output.
//!
//! `write_trace` produces three files in the output directory:
//! `trace.csv`, `energy_stats.csv` and `summary.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sim::{self, ConfigError, ScenarioConfig, SimulationTrace, SummaryOptions};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("{context}: {message}")]
    Syntax { context: String, message: String },
    #[error("{context}: {} validation error(s):\n{}", errors.len(), list(errors))]
    Invalid { context: String, errors: Vec<ConfigError> },
    #[error("serialization failed: {0}")]
    Serialize(String),
}

fn list(errors: &[ConfigError]) -> String {
    errors.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n")
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.to_path_buf(), source }
}

/// Parses and validates a scenario document. Never panics on malformed input.
pub fn parse_scenario_str(text: &str, context: &str) -> Result<ScenarioConfig, IoError> {
    let config: ScenarioConfig =
        toml::from_str(text).map_err(|e| IoError::Syntax { context: context.to_string(), message: e.to_string() })?;
    config.validate().map_err(|errors| IoError::Invalid { context: context.to_string(), errors })?;
    Ok(config)
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioConfig, IoError> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    parse_scenario_str(&text, &path.display().to_string())
}

pub fn scenario_to_toml(config: &ScenarioConfig) -> Result<String, IoError> {
    toml::to_string(config).map_err(|e| IoError::Serialize(e.to_string()))
}

/// SHA-256 of the canonical TOML serialization.
pub fn scenario_hash(config: &ScenarioConfig) -> String {
    let text = scenario_to_toml(config).unwrap_or_default();
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn write_scenario(config: &ScenarioConfig, path: &Path) -> Result<(), IoError> {
    let text = scenario_to_toml(config)?;
    fs::write(path, text).map_err(fs_err(path))
}

/// Column names in output order.
pub fn trace_header(nodes: &[String]) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for prefix in ["v", "p", "q", "xi", "up", "uq", "w", "y"] {
        cols.extend(nodes.iter().map(|n| format!("{prefix}_{n}")));
    }
    cols
}

pub fn trace_csv(trace: &SimulationTrace) -> String {
    let mut out = trace_header(&trace.nodes).join(",");
    out.push('\n');
    for r in &trace.rows {
        let _ = write!(out, "{}", r.t);
        for col in [&r.v, &r.p, &r.q, &r.xi, &r.up, &r.uq, &r.w, &r.y] {
            for x in col {
                let _ = write!(out, ",{x}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn energy_stats_csv(trace: &SimulationTrace) -> String {
    let mut out = String::from("t,p25,median,p75\n");
    for [t, a, b, c] in sim::energy_percentiles(trace) {
        let _ = writeln!(out, "{t},{a},{b},{c}");
    }
    out
}

pub fn summary_json(trace: &SimulationTrace, opts: SummaryOptions) -> Result<String, IoError> {
    serde_json::to_string_pretty(&sim::compute_summary(trace, opts)).map_err(|e| IoError::Serialize(e.to_string()))
}

/// Writes `trace.csv`, `energy_stats.csv` and `summary.json` into `dir`,
/// creating it if needed. Output depends only on the trace, so rewriting is
/// idempotent.
pub fn write_trace(trace: &SimulationTrace, dir: &Path, opts: SummaryOptions) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let files = [
        ("trace.csv", trace_csv(trace)),
        ("energy_stats.csv", energy_stats_csv(trace)),
        ("summary.json", summary_json(trace, opts)?),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(fs_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;
    use crate::sim::{run_scenario, RunOptions};

    #[test]
    fn empty_trace_is_header_only() {
        let t = SimulationTrace::empty("e", vec!["a".into(), "b".into()]);
        let csv = trace_csv(&t);
        assert_eq!(csv.lines().count(), 1);
        assert_eq!(csv.trim_end(), "t,v_a,v_b,p_a,p_b,q_a,q_b,xi_a,xi_b,up_a,up_b,uq_a,uq_b,w_a,w_b,y_a,y_b");
    }

    #[test]
    fn missing_sections_default() {
        let text = r#"
version = 1
name = "bare"
[simulation]
dt = 1.0
horizon = 10.0
[feeder]
v0 = 1.0
nodes = ["a"]
lines = [{ from = "sourcebus", to = "a", r = 0.01, x = 0.02 }]
"#;
        let c = parse_scenario_str(text, "bare").unwrap();
        assert!(c.events.is_empty());
        assert!(c.devices.is_empty());
    }

    #[test]
    fn strict_schema() {
        let base = scenario_to_toml(&scenarios::single_node(0.5)).unwrap();
        assert!(parse_scenario_str(&base, "ok").is_ok());
        let unknown = base.replacen("[simulation]", "[simulation]\nbogus = 3", 1);
        assert!(matches!(parse_scenario_str(&unknown, "x"), Err(IoError::Syntax { .. })));
        let no_version = base.replacen("version = 1\n", "", 1);
        assert!(matches!(parse_scenario_str(&no_version, "x"), Err(IoError::Syntax { .. })));
        let wrong_version = base.replacen("version = 1\n", "version = 9\n", 1);
        assert!(matches!(parse_scenario_str(&wrong_version, "x"), Err(IoError::Invalid { .. })));
        assert!(parse_scenario_str("not = [toml", "x").is_err());
    }

    #[test]
    fn negative_time_constant_names_device() {
        let mut c = scenarios::single_node(0.5);
        c.devices[0].t_p = -2.0;
        let text = toml::to_string(&c).unwrap();
        let err = parse_scenario_str(&text, "x").unwrap_err().to_string();
        assert!(err.contains(&c.devices[0].id) && err.contains("t_p"), "{err}");
    }

    #[test]
    fn write_is_idempotent() {
        let c = scenarios::single_node(0.5);
        let trace = run_scenario(&c, RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_trace(&trace, dir.path(), SummaryOptions::default()).unwrap();
        let first: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        write_trace(&trace, dir.path(), SummaryOptions::default()).unwrap();
        let second: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        let summary = String::from_utf8(first[2].clone()).unwrap();
        assert!(summary.contains("settling_time"));
    }

    #[test]
    fn unwritable_dir_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, "x").unwrap();
        let err = write_trace(&SimulationTrace::empty("e", vec![]), &file.join("sub"), SummaryOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("sub"), "{err}");
    }
}
