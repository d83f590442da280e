use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn podex(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_podex"));
    c.args(args).env_remove("PODEX_OUT_DIR");
    if let Some(d) = out_env {
        c.env("PODEX_OUT_DIR", d);
    }
    c.output().expect("spawn podex")
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
        .display()
        .to_string()
}

fn listed(o: &Output) -> Vec<PathBuf> {
    String::from_utf8_lossy(&o.stdout).lines().map(PathBuf::from).collect()
}

#[test]
fn every_shipped_scenario_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut names: Vec<_> = std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.len() >= 9);
    for name in names {
        let o = podex(&["run", &scenario(&name), "--out", dir.path().to_str().unwrap()], None);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        let files = listed(&o);
        assert!(files.iter().any(|f| f.extension().is_some_and(|e| e == "json")), "{name}");
        assert!(files.iter().all(|f| f.exists()));
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = podex(&["run", &scenario("perturbed_scan.toml"), "--out", d.path().to_str().unwrap()], None);
        assert!(o.status.success());
    }
    for f in ["perturbed-scan-k2.json", "perturbed-scan-k2.pairs.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let seeded = tempfile::tempdir().unwrap();
    let o = podex(
        &["run", &scenario("perturbed_scan.toml"), "--out", seeded.path().to_str().unwrap(), "--seed", "9"],
        None,
    );
    assert!(o.status.success());
    let json = |d: &Path| std::fs::read_to_string(d.join("perturbed-scan-k2.json")).unwrap();
    assert_ne!(json(a.path()), json(seeded.path()));
    assert!(json(seeded.path()).contains("\"seed\": 9"));
}

#[test]
fn malformed_expression_exits_with_config_code_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "name = \"bad\"\n[hamiltonian]\nexpr = \"(p1^2 + p2^2/2 - 1\"\nn = 2\n[task]\nkind = \"flow\"\nq = [0.0, 0.0]\np = [1.0, 0.0]\nt1 = 1.0\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = podex(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("column"));
    assert!(!out.exists());
    let v = podex(&["validate", path.to_str().unwrap()], None);
    assert_eq!(v.status.code(), Some(2));
}

#[test]
fn off_level_start_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("off.toml");
    std::fs::write(
        &path,
        "name = \"off\"\n[hamiltonian]\nbuiltin = \"flat\"\nn = 2\n[task]\nkind = \"flow\"\nq = [0.0, 0.0]\np = [2.0, 0.0]\nt1 = 1.0\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = podex(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("off the level"));
    assert!(!out.join("off.json").exists());
}

#[test]
fn validate_prints_the_resolved_scenario() {
    let o = podex(&["validate", &scenario("heart.toml")], None);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("grid = 360") && text.contains("center = [0.0, 0.0]"));
    assert!(text.contains("level_tol"));
}

#[test]
fn output_directory_precedence() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = podex(&["run", &scenario("flat_flow.toml")], Some(env_dir.path()));
    assert!(o.status.success());
    assert!(listed(&o).iter().all(|f| f.starts_with(env_dir.path())));
    let o = podex(
        &["run", &scenario("flat_flow.toml"), "--out", flag_dir.path().to_str().unwrap()],
        Some(env_dir.path()),
    );
    assert!(listed(&o).iter().all(|f| f.starts_with(flag_dir.path())));
}

#[test]
fn schema_lists_every_report() {
    let o = podex(&["schema"], None);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for f in ["orbit.csv", "pairs.csv", "dimension.csv", "torus.csv", "realize.csv", "intersections.csv", "target.csv"] {
        assert!(text.contains(f), "{f}");
    }
}
