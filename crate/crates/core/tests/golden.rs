//! Stored traces. Regenerate with `UPDATE_GOLDEN=1 cargo test --test golden`.

use std::path::PathBuf;

use impedance_core::sim::{compute_metrics, run, trace_csv_string};

#[path = "common/golden.rs"]
mod golden;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

#[test]
fn traces_match_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (name, cfg) in golden::golden_scenarios() {
        let got = trace_csv_string(&run(&cfg).unwrap().trace).unwrap();
        let path = data_dir().join(format!("{name}.csv"));
        if update {
            std::fs::write(&path, &got).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(want == got, "{name} trace drifted from {}", path.display());
    }
}

/// Reads the stored slider trace with a plain text split and recomputes
/// the RMS error and overshoot from scratch.
#[test]
fn metrics_match_independent_computation() {
    let text = std::fs::read_to_string(data_dir().join("slider.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).unwrap();
    let (ct, cf, cd) = (col("t"), col("F_env"), col("F_d"));
    let rows: Vec<(f64, f64, f64)> = lines
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            (v[ct].parse().unwrap(), v[cf].parse().unwrap(), v[cd].parse().unwrap())
        })
        .collect();
    let t_end = rows.last().unwrap().0;
    let kept: Vec<f64> = rows.iter().filter(|r| r.0 >= 0.2 * t_end).map(|r| r.1 - r.2).collect();
    let rms = (kept.iter().map(|e| e * e).sum::<f64>() / kept.len() as f64).sqrt();
    let over = kept.iter().cloned().fold(0.0, f64::max);

    let (_, cfg) = golden::golden_scenarios().remove(0);
    let m = compute_metrics(&run(&cfg).unwrap().trace, 0.2, &[]).unwrap();
    assert!((m.rms_force_error - rms).abs() < 1e-12, "{} vs {rms}", m.rms_force_error);
    assert!((m.max_overshoot - over).abs() < 1e-12);
    assert_eq!(m.samples, kept.len());
}
