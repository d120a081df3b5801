use std::path::Path;

use impedance_core::estimator::{batch_ls, make_regressor, recover_impedance, EstimatorConfig, RegressorSample, RlsState};
use serde::{Deserialize, Serialize};

use crate::{
    apply_overrides, csv_error, ensure_dir, from_value, write_file, write_json, CliError, CliResult, Common, Metadata,
};

#[derive(Debug, Deserialize)]
struct InputRow {
    t: f64,
    delta: f64,
    force: f64,
    #[serde(default)]
    valid: Option<bool>,
}

#[derive(Serialize)]
struct EstimateRow {
    t: f64,
    #[serde(rename = "K_hat")]
    k_hat: f64,
    #[serde(rename = "D_hat")]
    d_hat: f64,
    theta_a: f64,
    theta_b: f64,
    mu: f64,
    innovation: f64,
    reset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fit {
    pub stiffness: f64,
    pub damping: f64,
    pub theta: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateSummary {
    pub rows: usize,
    pub regressors: usize,
    pub sample_period: f64,
    pub batch: Fit,
    pub batch_residual_rms: f64,
    pub rls_final: Fit,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    metadata: &'a Metadata,
    #[serde(flatten)]
    summary: &'a EstimateSummary,
}

fn read_rows(path: &Path) -> CliResult<Vec<InputRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?.clone();
    for need in ["t", "delta", "force"] {
        if !headers.iter().any(|h| h == need) {
            return Err(CliError::Config(format!("{}: missing column `{need}`", path.display())));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<InputRow>().enumerate() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(String::new(), |p| format!(" (line {})", p.line()));
            CliError::Config(format!("{}: row {}{line}: {e}", path.display(), i + 1))
        })?;
        if !(row.t.is_finite() && row.delta.is_finite() && row.force.is_finite()) {
            return Err(CliError::Config(format!("{}: row {}: non-finite value", path.display(), i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn fit(theta: [f64; 2], period: f64) -> CliResult<Fit> {
    let e = recover_impedance(&theta.into(), period)?;
    Ok(Fit { stiffness: e.stiffness, damping: e.damping, theta })
}

/// Replays recorded probe samples through the estimator and a batch fit.
pub fn cmd_estimate(path: &Path, common: &Common) -> CliResult<EstimateSummary> {
    let rows = read_rows(path)?;
    if rows.len() < 3 {
        return Err(CliError::Config(format!(
            "{}: insufficient data, {} row(s) but at least 3 are needed",
            path.display(),
            rows.len()
        )));
    }
    let period = rows[1].t - rows[0].t;
    for (i, w) in rows.windows(2).enumerate() {
        let dt = w[1].t - w[0].t;
        if !(period > 0.0 && (dt - period).abs() <= 1e-6 * period) {
            return Err(CliError::Config(format!(
                "{}: row {}: samples must be uniformly spaced ({dt} s vs {period} s)",
                path.display(),
                i + 2
            )));
        }
    }

    let mut tree = serde_json::to_value(EstimatorConfig::probe()).map_err(|e| CliError::Numerical(e.to_string()))?;
    apply_overrides(&mut tree, &common.overrides)?;
    let cfg: EstimatorConfig = from_value(tree, "estimator config")?;
    let mut rls = RlsState::new(&cfg, period)?;
    let resolved = serde_json::json!({ "estimator": cfg, "sample_period": period });
    let meta = Metadata::new("estimate", Some(path), &common.overrides, resolved);

    let mut samples: Vec<RegressorSample> = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    for pair in rows.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        if prev.valid == Some(false) || cur.valid == Some(false) {
            continue;
        }
        let s = make_regressor(cur.force, prev.force, cur.delta, prev.delta)?;
        let info = rls.update(&s);
        samples.push(s);
        let e = rls.estimate(cur.t, info.innovation);
        w.serialize(EstimateRow {
            t: cur.t,
            k_hat: e.stiffness,
            d_hat: e.damping,
            theta_a: rls.theta[0],
            theta_b: rls.theta[1],
            mu: info.mu,
            innovation: info.innovation,
            reset: info.reset,
        })
        .map_err(csv_error)?;
    }
    if samples.len() < 2 {
        return Err(CliError::Config(format!(
            "{}: insufficient data, only {} valid regressor(s)",
            path.display(),
            samples.len()
        )));
    }
    let theta = batch_ls(&samples)?;
    let residual_rms =
        (samples.iter().map(|s| (s.y - s.phi.dot(&theta)).powi(2)).sum::<f64>() / samples.len() as f64).sqrt();
    let summary = EstimateSummary {
        rows: rows.len(),
        regressors: samples.len(),
        sample_period: period,
        batch: fit([theta[0], theta[1]], period)?,
        batch_residual_rms: residual_rms,
        rls_final: fit([rls.theta[0], rls.theta[1]], period)?,
    };

    ensure_dir(&common.out)?;
    write_file(&common.out, "estimates.csv", &w.into_inner().map_err(|e| CliError::Numerical(e.to_string()))?)?;
    write_json(&common.out, "summary.json", &SummaryFile { metadata: &meta, summary: &summary })?;
    common.say(format!(
        "{} regressors, T = {} s: batch K = {:.3} N/m, D = {:.4} N·s/m; RLS final K = {:.3} N/m, D = {:.4} N·s/m",
        summary.regressors,
        period,
        summary.batch.stiffness,
        summary.batch.damping,
        summary.rls_final.stiffness,
        summary.rls_final.damping
    ));
    Ok(summary)
}
