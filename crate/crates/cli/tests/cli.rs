use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_impedance"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bundled_static_slider_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("static_slider.json");
    let o = run(&["run", path.to_str().unwrap(), "--out", "res", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let out = dir.path().join("res");
    for f in ["trace.csv", "plot.csv", "metrics.json", "metadata.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["status"], "completed");
    assert!(m["metrics"]["rms_force_error"].as_f64().unwrap() < 0.25);
    assert_eq!(m["metadata"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["metadata"]["config"]["name"], "static_slider");
    let plot = std::fs::read_to_string(out.join("plot.csv")).unwrap();
    assert!(plot.lines().count() <= 2001);
    // Nothing written outside the output directory.
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec!["res"]);
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "no/such/scenario.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no/such/scenario.json"), "{}", stderr(&o));
}

#[test]
fn overrides_are_honoured_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("static_slider.json");
    let o = run(
        &[
            "run",
            path.to_str().unwrap(),
            "--set",
            "controller.adaptation=false",
            "--set",
            "duration=3",
            "--seed",
            "42",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta = json(&dir.path().join("o/metadata.json"));
    assert_eq!(meta["config"]["controller"]["adaptation"], false);
    assert_eq!(meta["config"]["seed"], 42);
    assert_eq!(meta["overrides"][0], "controller.adaptation=false");
    let trace = std::fs::read_to_string(dir.path().join("o/trace.csv")).unwrap();
    let col = trace.lines().next().unwrap().split(',').position(|c| c == "K_hat_used").unwrap();
    assert!(trace.lines().skip(1).all(|l| l.split(',').nth(col).unwrap().parse::<f64>().unwrap() == 3200.0));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = json(&scenario("static_slider.json"));
    v["controller"]["surprise"] = true.into();
    std::fs::write(dir.path().join("bad.json"), serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let o = run(&["run", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("surprise") && stderr(&o).contains("line"), "{}", stderr(&o));

    let mut v = json(&scenario("static_slider.json"));
    v["schema_version"] = 7.into();
    std::fs::write(dir.path().join("old.json"), v.to_string()).unwrap();
    let o = run(&["run", "old.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("schema_version"));

    let path = scenario("static_slider.json");
    let o = run(&["run", path.to_str().unwrap(), "--set", "controller.bogus=1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn unstable_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("static_slider.json");
    let o = run(
        &[
            "run",
            path.to_str().unwrap(),
            "--set",
            "controller.adaptation=false",
            "--set",
            "controller.fixed_stiffness=20",
            "--quiet",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("aborted"));
    let m = json(&dir.path().join("out/metrics.json"));
    assert_eq!(m["status"], "unstable");
}

#[test]
fn batch_runs_into_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let a = scenario("static_slider.json");
    let b = scenario("pulsating.json");
    let o = run(
        &["run", a.to_str().unwrap(), b.to_str().unwrap(), "--set", "duration=2", "--quiet"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("out/static_slider/trace.csv").is_file());
    assert!(dir.path().join("out/pulsating/trace.csv").is_file());
}

#[test]
fn margins_table_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("loop_default.json");
    let o = run(&["margins", cfg.to_str().unwrap(), "--ratios", "0.1,1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("GM dB"));
    let m = json(&dir.path().join("out/margins.json"));
    assert_eq!(m["rows"][0]["ratio"], 0.1);
    assert_eq!(m["rows"][0]["stable"], false);
    assert_eq!(m["rows"][1]["stable"], true);
    let bode = std::fs::read_to_string(dir.path().join("out/bode.csv")).unwrap();
    assert!(bode.starts_with("ratio,f,magnitude_db,phase_deg,at_pole"));
    assert_eq!(bode.lines().count(), 1 + 2 * 2000);

    let o = run(&["margins", "--ratios", "0,1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

fn write_samples(path: &Path, rows: usize) {
    // Exact bilinear spring-damper response to a zero-mean displacement, as
    // band-passed probe samples are.
    let (k, d, t) = (1200.0f64, 3.0f64, 1e-3f64);
    let (a, b) = ((2.0 * d + t * k) / t, (-2.0 * d + t * k) / t);
    let disp: Vec<f64> = (0..rows)
        .map(|i| {
            let s = i as f64 * t;
            2.5e-5 * (2.0 * std::f64::consts::PI * 20.0 * s).sin() + 1e-5 * (2.0 * std::f64::consts::PI * 7.0 * s).sin()
        })
        .collect();
    let mut f = vec![0.0; rows];
    for i in 1..rows {
        f[i] = a * disp[i] + b * disp[i - 1] - f[i - 1];
    }
    let mut text = String::from("t,delta,force\n");
    for i in 0..rows {
        text.push_str(&format!("{},{},{}\n", i as f64 * t, disp[i], f[i]));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn estimate_recovers_generator_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    write_samples(&dir.path().join("s.csv"), 2000);
    let o = run(&["estimate", "s.csv", "--out", "a"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = json(&dir.path().join("a/summary.json"));
    let k = s["rls_final"]["stiffness"].as_f64().unwrap();
    assert!((k / 1200.0 - 1.0).abs() < 0.01, "{k}");
    assert!((s["batch"]["stiffness"].as_f64().unwrap() / 1200.0 - 1.0).abs() < 1e-6);
    let o = run(&["estimate", "s.csv", "--out", "b", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    for f in ["estimates.csv", "summary.json"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn estimate_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("one.csv"), "t,delta,force\n0,0.001,1\n").unwrap();
    let o = run(&["estimate", "one.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("insufficient"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.csv"), "t,delta,force\n0,0.001,1\n0.001,0.002,2\n0.002,abc,3\n").unwrap();
    let o = run(&["estimate", "bad.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));

    std::fs::write(dir.path().join("cols.csv"), "time,delta,force\n0,0,0\n").unwrap();
    let o = run(&["estimate", "cols.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`t`"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["run"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--version"], dir.path()).status.code(), Some(0));
}
