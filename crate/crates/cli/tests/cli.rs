use std::process::Command;

fn stvf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stvf"))
}

#[test]
fn default_config_round_trips_through_config_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = stvf().arg("default-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lambda = 200"), "{text}");
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    let run = stvf()
        .args(["tv-oracle", "--element", "cr", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("tv-oracle: PASS"));
}

#[test]
fn denoise_csv_passes_the_standalone_checker() {
    let dir = tempfile::tempdir().unwrap();
    let run = stvf()
        .args(["denoise", "--level", "3", "--tau", "0.01", "--seed", "4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout).into_owned();
    let csv = stdout
        .lines()
        .filter_map(|l| l.trim().strip_prefix("wrote "))
        .find(|p| p.ends_with(".csv"))
        .unwrap_or_else(|| panic!("no csv in {stdout}"));
    let check = stvf().args(["check-csv", csv]).output().unwrap();
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stdout));
    assert!(String::from_utf8_lossy(&check.stdout).contains("10 steps"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "lamda = 3.0\n").unwrap();
    let run = stvf().args(["denoise", "--config"]).arg(&path).output().unwrap();
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("lamda"));
}

#[test]
fn failing_study_sets_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    // interpolated P1 overshoots the square's perimeter at every level
    let run = stvf().args(["tv-oracle", "--element", "p1", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("tv-oracle: FAIL"));
}
