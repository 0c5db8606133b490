use std::fs;
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_boltzmann-fourier"))
}

#[test]
fn constants_scenario_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"grid": {"x_min": 1e-6, "x_max": 40.0, "points": 120}, "alpha_sweep": [0.5, 1.0, 2.0]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = binary()
        .args(["constants", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out.join("constants.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("constants.report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"grdi": {}}"#).unwrap();
    let status = binary()
        .args(["constants", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
