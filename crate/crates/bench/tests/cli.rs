use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench")).args(args).output().expect("bench binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("short.toml");
    fs::write(
        &path,
        "duration = 1.0\ndisturbance_mode = \"none\"\n\n[obstacle]\nenabled = false\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");
    let out_arg = out.to_string_lossy().into_owned();

    let run = bench(&["run", "--config", &config, "--controller", "all", "--sequential", "--out", &out_arg]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    for name in ["nmpc", "sdc", "robust-sdc"] {
        assert!(stdout.contains(&format!("[{name}]")), "{stdout}");
        for file in ["telemetry.csv", "metrics.txt", "metrics.json", "run.json"] {
            assert!(out.join(name).join(file).is_file(), "{name}/{file}");
        }
        let csv = fs::read_to_string(out.join(name).join("telemetry.csv")).unwrap();
        assert_eq!(csv.lines().count(), 11);
    }

    let compare = bench(&["compare", "--out", &out_arg]);
    assert!(compare.status.success());
    let table = String::from_utf8_lossy(&compare.stdout);
    assert_eq!(fs::read_to_string(out.join("comparison.txt")).unwrap(), table);
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().any(|l| l.starts_with("nmpc") && l.contains("1.000")));
    assert!(!table.contains("warning"));
}

#[test]
fn seed_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");
    let out_arg = out.to_string_lossy().into_owned();
    let run = bench(&["run", "--config", &config, "--controller", "sdc", "--seed", "7", "--out", &out_arg]);
    assert!(run.status.success());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sdc/run.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);
    assert!(!out.join("nmpc").exists());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().to_string_lossy().into_owned();
    let compare = bench(&["compare", "--out", &empty]);
    assert!(!compare.status.success());
    assert!(String::from_utf8_lossy(&compare.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "duration = -1.0\n").unwrap();
    let run = bench(&["run", "--config", &bad.to_string_lossy(), "--out", &empty]);
    assert!(!run.status.success());

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "no_such_field = 1\n").unwrap();
    let run = bench(&["run", "--config", &unknown.to_string_lossy(), "--out", &empty]);
    assert!(!run.status.success());
}
