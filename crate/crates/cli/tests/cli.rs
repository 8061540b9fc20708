use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn speci(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speci"))
        .args(args)
        .env("SPECI_OUTPUT_ROOT", root)
        .output()
        .expect("spawn speci")
}

fn config(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_with_status_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = speci(tmp.path(), &["run", "does-not-exist.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("schema_version"));
}

#[test]
fn invalid_config_exits_with_status_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "schema_version = 1\n[model]\nd = 10\nheads = 3\n").unwrap();
    let o = speci(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_ablation_exits_with_status_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = speci(tmp.path(), &["run", &config("smoke.toml"), "--ablate", "everything"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn run_resume_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let o = speci(tmp.path(), &["run", &config("smoke.toml")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("er") && out.contains("packnet") && out.contains("FWT"), "{out}");

    let dir = tmp.path().join("runs").join("smoke");
    let metrics = std::fs::read(dir.join("metrics.csv")).unwrap();
    assert!(dir.join("config.toml").is_file() && dir.join("summary.csv").is_file());

    // A completed directory is never rewritten by `run`; `resume` leaves it as is.
    let again = speci(tmp.path(), &["run", &config("smoke.toml")]);
    assert!(!again.status.success());
    let r = speci(tmp.path(), &["resume", dir.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(std::fs::read(dir.join("metrics.csv")).unwrap(), metrics);

    let c = speci(tmp.path(), &["compare", dir.to_str().unwrap()]);
    assert!(c.status.success(), "{}", stderr(&c));
    let table = stdout(&c);
    assert!(table.contains("object-2") && table.contains("smoke/er"), "{table}");
}

#[test]
fn seed_override_changes_the_run_list() {
    let tmp = tempfile::tempdir().unwrap();
    let o = speci(tmp.path(), &["run", &config("smoke.toml"), "--seed", "3", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs = tmp.path().join("runs").join("smoke").join("runs");
    for id in ["er-seed3", "er-seed4", "packnet-seed3", "packnet-seed4"] {
        assert!(runs.join(id).join("metrics.csv").is_file(), "{id}");
    }
}

#[test]
fn compare_requires_a_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let o = speci(tmp.path(), &["compare"]);
    assert_eq!(o.status.code(), Some(2));
}
