use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
horizon_seconds = 86400
sample_period = 900
[cloud]
image_replication_delay = 0
[[regions]]
name = "a"
capacity = 20
[[vos]]
name = "UCSD"
priority_rank = 0
[[ces]]
name = "ce"
regions = ["a"]
vo_allowlist = ["UCSD"]
[policy]
schedule = [{ day = 0, cores = 160 }]
[output]
decision_trace = true
[[campaigns]]
name = "ana"
vo = "UCSD"
job_count = 300
cores_per_job = 2
cpu_seconds = { family = "exponential", mean = 7200 }
"#;

fn glidesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glidesim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn presets_lists_builtins() {
    let out = glidesim(&["presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["may2021", "onprem-fairshare", "dimuon", "backfill-generic"] {
        assert!(text.contains(name), "{name} missing from {text}");
    }
}

#[test]
fn validate_accepts_presets_and_files() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(glidesim(&["validate", "--config", "may2021"]).status.code(), Some(0));
    let cfg = write(dir.path(), "small.toml", SMALL);
    assert_eq!(glidesim(&["validate", "--config", &cfg]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2_with_a_location() {
    let dir = tempfile::tempdir().unwrap();
    let missing_vos = write(dir.path(), "novos.toml", "horizon_seconds = 100\n");
    let out = glidesim(&["validate", "--config", &missing_vos]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vos"));

    let bad_type = write(dir.path(), "type.toml", &SMALL.replace("capacity = 20", "capacity = \"many\""));
    let out = glidesim(&["run", "--config", &bad_type, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regions[0].capacity"));

    let syntax = write(dir.path(), "syntax.toml", "horizon_seconds = 10\n[[regions]\n");
    let out = glidesim(&["validate", "--config", &syntax]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    assert_eq!(glidesim(&["validate", "--config", "/no/such/file.toml"]).status.code(), Some(2));
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = glidesim(&["sweep", "--config", &cfg, "--param", "regions..capacity", "--values", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("out");
    let out = glidesim(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--baseline",
        &cfg,
        "--campaign",
        "absent",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent"));

    // --out names an existing file
    let out = glidesim(&["run", "--config", &cfg, "--out", &cfg]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_writes_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let run_into = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = glidesim(&["run", "--config", &cfg, "--seed", seed, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let read = |f: &str| fs::read_to_string(out_dir.join(f)).unwrap();
        (read("timeseries.csv"), read("summary.txt"), read("decisions.csv"))
    };
    let (ts, summary, decisions) = run_into("a", "4");
    assert_eq!(ts.lines().count(), 86_400 / 900 + 2);
    assert!(ts.starts_with("time_s,instances_live_a,instances_pending_a,provisioned_cores,busy_cores_UCSD,"));
    assert!(summary.contains("seed: 4\n"));
    assert!(summary.contains("campaign.ana.jobs: 300\n"));
    assert!(decisions.starts_with("time_s,actor,decision\n"));

    let again = run_into("b", "4");
    assert_eq!((ts.as_str(), summary.as_str()), (again.0.as_str(), again.1.as_str()));
    let other = run_into("c", "5");
    assert_ne!(ts, other.0);
}

#[test]
fn baseline_comparison_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = glidesim(&[
        "run",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
        "--baseline",
        &cfg,
        "--campaign",
        "ana",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("speedup.value: 1.0000"), "{text}");
}

#[test]
fn sweep_prints_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = glidesim(&[
        "sweep",
        "--config",
        &cfg,
        "--param",
        "regions.0.hazard_base",
        "--values",
        "0,0.5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,1,"));
    assert!(rows[2].starts_with("0.5,2,"));
    assert_eq!(fs::read_to_string(dir.path().join("sweep.csv")).unwrap(), text);
}
