use std::path::{Path, PathBuf};
use std::thread;

use impedance_core::control::PiGains;
use impedance_core::sim::{self, Metrics, RunStatus, ScenarioConfig};
use serde::Serialize;
use serde_json::Value;

use crate::{
    apply_overrides, csv_error, ensure_dir, from_value, parse_json, read_text, safe_name, write_file, write_json,
    CliError, CliResult, Common, Metadata,
};

/// Rows kept in the plot series.
const PLOT_ROWS: usize = 2000;

#[derive(Serialize)]
struct RunReport<'a> {
    metadata: &'a Metadata,
    #[serde(flatten)]
    status: RunStatus,
    metrics: Metrics,
    pi_gains: PiGains,
    transition_windows: &'a [(f64, f64)],
    ticks: usize,
}

#[derive(Serialize)]
struct PlotRow {
    t: f64,
    x_e: f64,
    z_s: f64,
    #[serde(rename = "F_env")]
    f_env: f64,
    #[serde(rename = "F_d")]
    f_d: f64,
    #[serde(rename = "K_true")]
    k_true: f64,
    #[serde(rename = "K_hat")]
    k_hat: f64,
    #[serde(rename = "K_hat_used")]
    k_hat_used: f64,
}

/// Reads a scenario file and applies `--set` and `--seed`.
pub fn load_scenario(path: &Path, common: &Common) -> CliResult<(ScenarioConfig, Value)> {
    let text = read_text(path)?;
    let parsed: ScenarioConfig = parse_json(&text, path)?;
    let mut tree = serde_json::to_value(&parsed).map_err(|e| CliError::Numerical(e.to_string()))?;
    apply_overrides(&mut tree, &common.overrides)?;
    if let Some(seed) = common.seed {
        tree["seed"] = seed.into();
    }
    let cfg: ScenarioConfig = from_value(tree, &path.display().to_string())?;
    cfg.validate()?;
    let resolved = serde_json::to_value(&cfg).map_err(|e| CliError::Numerical(e.to_string()))?;
    Ok((cfg, resolved))
}

fn run_one(path: &Path, dir: &Path, common: &Common) -> CliResult<()> {
    let (cfg, resolved) = load_scenario(path, common)?;
    let meta = Metadata::new("run", Some(path), &common.overrides, resolved);
    let out = sim::run(&cfg)?;
    ensure_dir(dir)?;

    let mut trace = Vec::new();
    sim::write_trace_csv(&out.trace, &mut trace)?;
    write_file(dir, "trace.csv", &trace)?;

    let stride = out.trace.len().div_ceil(PLOT_ROWS).max(1);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in out.trace.iter().step_by(stride) {
        w.serialize(PlotRow {
            t: r.t,
            x_e: r.x_e,
            z_s: r.z_s,
            f_env: r.f_env,
            f_d: r.f_d,
            k_true: r.k_true,
            k_hat: r.k_hat,
            k_hat_used: r.k_hat_used,
        })
        .map_err(csv_error)?;
    }
    let plot = w.into_inner().map_err(|e| CliError::Numerical(e.to_string()))?;
    write_file(dir, "plot.csv", &plot)?;

    write_json(
        dir,
        "metrics.json",
        &RunReport {
            metadata: &meta,
            status: out.status,
            metrics: out.metrics,
            pi_gains: cfg.controller.force_loop.gains()?,
            transition_windows: &out.transition_windows,
            ticks: out.trace.len(),
        },
    )?;
    write_json(dir, "metadata.json", &meta)?;

    let m = &out.metrics;
    common.say(format!(
        "{}: rms error {:.4} N, overshoot {:.4} N, settling {}, estimate error {} -> {}",
        if cfg.name.is_empty() { path.display().to_string() } else { cfg.name.clone() },
        m.rms_force_error,
        m.max_overshoot,
        m.settling_time.map_or("never".into(), |t| format!("{t:.3} s")),
        m.estimate_rel_error_rms.map_or("n/a".into(), |e| format!("{:.2}%", e * 100.0)),
        dir.display()
    ));
    match out.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Unstable { t, force, limit } => Err(CliError::Unstable(format!(
            "{}: run aborted at t = {t:.3} s, |force| {force:.2} N exceeded {limit:.2} N",
            path.display()
        ))),
    }
}

/// Runs each scenario. A single scenario writes straight into `--out`;
/// several run in parallel, each into `--out/<file stem>`.
pub fn cmd_run(paths: &[PathBuf], common: &Common) -> CliResult<()> {
    match paths {
        [] => Err(CliError::Usage("run needs at least one scenario file".into())),
        [one] => run_one(one, &common.out, common),
        many => {
            let dirs: Vec<PathBuf> = many
                .iter()
                .map(|p| common.out.join(safe_name(&p.file_stem().unwrap_or_default().to_string_lossy())))
                .collect();
            for (i, d) in dirs.iter().enumerate() {
                if dirs[..i].contains(d) {
                    return Err(CliError::Usage(format!("two scenarios would share {}", d.display())));
                }
            }
            let results: Vec<CliResult<()>> = thread::scope(|s| {
                let handles: Vec<_> = many
                    .iter()
                    .zip(&dirs)
                    .map(|(p, d)| s.spawn(move || run_one(p, d, common)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Numerical("scenario thread panicked".into()))))
                    .collect()
            });
            let mut worst: Option<CliError> = None;
            for r in results {
                if let Err(e) = r {
                    eprintln!("error: {e}");
                    if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                        worst = Some(e);
                    }
                }
            }
            worst.map_or(Ok(()), Err)
        }
    }
}
