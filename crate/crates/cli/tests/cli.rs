use std::process::Command;

fn dlmjoint() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dlmjoint"))
}

#[test]
fn show_config_round_trips_through_the_loader() {
    let out = dlmjoint().args(["show-config", "--preset", "two-sentence"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = dlmjoint::workbench::parse_config(&text).unwrap();
    assert_eq!(cfg, dlmjoint::workbench::ExperimentConfig::two_sentence());
}

#[test]
fn missing_artifact_reports_category_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dlmjoint()
        .args(["train-base", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: category=missing_artifact"), "{err}");
    assert!(err.contains("gen-data"), "{err}");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = dlmjoint::workbench::ExperimentConfig::two_sentence().to_toml().unwrap();
    std::fs::write(&path, text.replace("[data]\n", "[data]\nbogus = 1\n")).unwrap();
    let out = dlmjoint().args(["gen-data", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("category=config"));
}

#[test]
fn bad_policy_is_an_input_error() {
    let out = dlmjoint().args(["sample", "--policy", "widest"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("category=input"));
}

#[test]
fn gen_data_replays_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    let out = dlmjoint().args(["show-config", "--preset", "two-sentence"]).output().unwrap();
    std::fs::write(&cfg, out.stdout).unwrap();
    let run = dir.path().join("run");
    let first = dlmjoint()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(first.status.success());
    assert!(run.join("manifests/gen-data.json").exists());

    let replayed = dlmjoint()
        .args(["replay", "--manifest"])
        .arg(run.join("manifests/gen-data.json"))
        .arg("--out")
        .arg(dir.path().join("again"))
        .output()
        .unwrap();
    assert!(replayed.status.success(), "{}", String::from_utf8_lossy(&replayed.stderr));
    assert_eq!(
        std::fs::read(run.join("data/corpus.txt")).unwrap(),
        std::fs::read(dir.path().join("again/data/corpus.txt")).unwrap()
    );
}
