use std::process::Command;

fn voltsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voltsim"))
}

fn scenario(name: &str) -> String {
    format!("{}/scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = voltsim()
        .args(["run", &scenario("single_node_stable"), "--out"])
        .arg(dir.path())
        .args(["--horizon", "50", "--sequential"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,v_n1,p_n1,q_n1,xi_n1,up_n1,uq_n1,w_n1,y_n1\n"));
    assert_eq!(csv.lines().count(), 52);
    assert!(dir.path().join("energy_stats.csv").exists());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["horizon"], 50.0);
}

#[test]
fn disable_adaptive_freezes_controllers() {
    let dir = tempfile::tempdir().unwrap();
    let out = voltsim()
        .args(["run", &scenario("feeder37_scenario1_bias"), "--disable-adaptive", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let w_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("w_")).map(|(i, _)| i).collect();
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(w_cols.iter().all(|&i| cells[i] == "0"));
    }
}

#[test]
fn check_reports_both_curve_sets() {
    let out = voltsim().args(["check", &scenario("five_node_attack")]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("pre-attack curves") && text.contains("post-attack curves"));
    assert!(text.contains("stable (certified)") && text.contains("not certified"));
}

#[test]
fn verify_passes_on_five_node_attack() {
    for mode in ["injection", "bias"] {
        let out = voltsim().args(["verify", &scenario("five_node_attack"), "--mode", mode]).output().unwrap();
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(out.status.success(), "{text}");
        assert!(text.contains("result: PASS"));
    }
}

#[test]
fn bad_input_exits_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "version = 1\nname = 3\n").unwrap();
    let out = voltsim().arg("check").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn bundled_writes_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = voltsim().args(["bundled", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), voltsim::scenarios::bundled().len());
}
