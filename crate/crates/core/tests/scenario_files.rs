use std::path::Path;

use voltsim::io;
use voltsim::scenarios;

fn dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios"))
}

#[test]
fn shipped_files_match_generators() {
    for (name, config) in scenarios::bundled() {
        let path = dir().join(format!("{name}.toml"));
        let parsed = io::parse_scenario(&path).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(parsed, config, "{name} is stale; regenerate with `voltsim bundled --out crates/core/scenarios`");
    }
}

#[test]
fn every_shipped_file_is_bundled() {
    let names: Vec<String> = scenarios::bundled().iter().map(|(n, _)| format!("{n}.toml")).collect();
    for entry in std::fs::read_dir(dir()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(names.contains(&name), "unexpected file {name}");
    }
}

#[test]
fn round_trip_is_exact() {
    for (name, config) in scenarios::bundled() {
        let text = io::scenario_to_toml(&config).unwrap();
        assert_eq!(io::parse_scenario_str(&text, name).unwrap(), config);
        assert_eq!(io::scenario_to_toml(&io::parse_scenario_str(&text, name).unwrap()).unwrap(), text);
    }
}

#[test]
fn malformed_documents_never_panic() {
    let base = io::scenario_to_toml(&scenarios::five_node_attack()).unwrap();
    for cut in (0..base.len()).step_by(37) {
        let _ = io::parse_scenario_str(&base[..cut], "truncated");
    }
    let mangled = base.replace("r = 0.01", "r = -0.01");
    assert!(io::parse_scenario_str(&mangled, "negative").is_err());
    let missing = base.replace("node = \"t3\"", "node = \"nowhere\"");
    let err = io::parse_scenario_str(&missing, "x").unwrap_err().to_string();
    assert!(err.contains("nowhere"), "{err}");
}
