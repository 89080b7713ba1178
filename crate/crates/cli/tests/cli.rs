use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gpmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpmpc")).args(args).output().expect("spawn gpmpc")
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml")).display().to_string()
}

fn path(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn metrics_reproduces_the_run_summary() {
    let dir = tempfile::tempdir().unwrap();
    let log = path(&dir, "log.csv");
    let summary = path(&dir, "summary.toml");
    let run = gpmpc(&[
        "run",
        "--scenario",
        &scenario("polishing"),
        "--out",
        log.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let again = gpmpc(&["metrics", "--log", log.to_str().unwrap()]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(again.stdout, run.stdout);
    assert_eq!(std::fs::read(&summary).unwrap(), run.stdout);
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.contains("rms_velocity_high"));
}

#[test]
fn timing_file_has_one_row_per_plan() {
    let dir = tempfile::tempdir().unwrap();
    let log = path(&dir, "log.csv");
    let timing = path(&dir, "timing.csv");
    let run = gpmpc(&[
        "run",
        "--scenario",
        &scenario("dual_goal"),
        "--out",
        log.to_str().unwrap(),
        "--timing",
        timing.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let text = std::fs::read_to_string(&timing).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,solve_time,iterations"));
    let plans = std::fs::read_to_string(&log).unwrap().lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(lines.count(), plans);
}

#[test]
fn empty_demo_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let empty = path(&dir, "empty_demo.csv");
    std::fs::write(&empty, "").unwrap();
    let out = gpmpc(&["fit", "--demos", empty.to_str().unwrap(), "--out", path(&dir, "m.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty_demo.csv"), "{}", stderr(&out));
}

#[test]
fn unknown_scenario_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let bad = path(&dir, "bad.toml");
    std::fs::write(&bad, "duration = 1.0\n[robot]\ndampng = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]\n").unwrap();
    let out = gpmpc(&["run", "--scenario", bad.to_str().unwrap(), "--out", path(&dir, "log.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("dampng") && msg.contains("bad.toml"), "{msg}");
}

#[test]
fn missing_model_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gpmpc(&[
        "run",
        "--scenario",
        &scenario("polishing"),
        "--models",
        "no_such_model.json",
        "--out",
        path(&dir, "log.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_model.json"));
}

#[test]
fn bad_arguments_exit_with_usage_error() {
    assert_eq!(gpmpc(&["run"]).status.code(), Some(2));
    assert_eq!(gpmpc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gpmpc(&["--help"]).status.code(), Some(0));
}

#[test]
fn analyze_writes_one_row_per_grid_line() {
    let dir = tempfile::tempdir().unwrap();
    let spec = path(&dir, "sweep.toml");
    std::fs::write(
        &spec,
        "integrators = [\"euler\", \"implicit\"]\nobjectives = [\"trace\"]\nsigma_f = [0.1, 1.0, 10.0]\nmass = [5.0, 10.0]\ndamping = [100.0, 500.0]\n",
    )
    .unwrap();
    let csv = path(&dir, "sweep.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_gpmpc"))
        .args(["analyze", "--sweep", spec.to_str().unwrap(), "--out", csv.to_str().unwrap()])
        .env("GPMPC_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2 * 3);

    std::fs::write(&spec, "sigma_f = []\n").unwrap();
    let out = gpmpc(&["analyze", "--sweep", spec.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sigma_f"));
}

#[test]
fn demo_gen_then_fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let demos = path(&dir, "demos");
    let out = gpmpc(&["demo-gen", "--scenario", &scenario("contact_soft"), "--out-dir", demos.to_str().unwrap(), "--prefix", "soft"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let files: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(files.len(), 3);
    assert!(files[0].ends_with("soft_0.csv"));
    let model = path(&dir, "soft.json");
    let mut args = vec!["fit", "--mean", "hinge", "--hinge-axes", "0", "--max-points", "40", "--out", model.to_str().unwrap(), "--demos"];
    args.extend(files.iter().map(String::as_str));
    let out = gpmpc(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = String::from_utf8(out.stdout).unwrap();
    assert_eq!(report.lines().count(), 7);
    assert!(report.starts_with("axis,nll_init,nll_final"));
    let json = std::fs::read_to_string(&model).unwrap();
    assert!(json.contains("\"hinge\""));
}

#[test]
fn shipped_scenarios_and_models_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let sc = gpmpc_core::sim::Scenario::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert!(!sc.gp.models.is_empty(), "{} lists no models", p.display());
            for m in &sc.gp.models {
                gpmpc_core::sim::load_model(m).unwrap_or_else(|e| panic!("{}: {e}", m.display()));
            }
            count += 1;
        }
    }
    assert!(count >= 9);
}
