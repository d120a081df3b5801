use std::path::Path;

use impedance_core::sim::SCHEMA_VERSION;
use impedance_core::stability::{bode, compose_open_loop, logspace, margin_sweep, LoopModel, MarginTable, Sweep};
use serde::{Deserialize, Serialize};

use crate::{
    apply_overrides, csv_error, ensure_dir, from_value, parse_json, read_text, write_file, write_json, CliError,
    CliResult, Common, Metadata,
};

/// Loop description read by `margins`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub model: LoopModel,
    #[serde(default)]
    pub sweep: Sweep,
}

impl Default for LoopConfigFile {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: LoopModel::default(),
            sweep: Sweep::default(),
        }
    }
}

#[derive(Serialize)]
struct MarginsReport<'a> {
    metadata: &'a Metadata,
    #[serde(flatten)]
    table: &'a MarginTable,
}

#[derive(Serialize)]
struct BodeRow {
    ratio: f64,
    f: f64,
    magnitude_db: f64,
    phase_deg: f64,
    at_pole: bool,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("inf".into(), |v| format!("{v:.digits$}"))
}

/// Margins of the loop at each K̂/K_E ratio. Without a file the default
/// loop is used.
pub fn cmd_margins(path: Option<&Path>, ratios: &[f64], common: &Common) -> CliResult<()> {
    if ratios.is_empty() {
        return Err(CliError::Usage("the ratio grid is empty".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(CliError::Usage(format!("ratio {r} must be positive")));
    }
    let parsed = match path {
        Some(p) => parse_json::<LoopConfigFile>(&read_text(p)?, p)?,
        None => LoopConfigFile::default(),
    };
    let mut tree = serde_json::to_value(&parsed).map_err(|e| CliError::Numerical(e.to_string()))?;
    apply_overrides(&mut tree, &common.overrides)?;
    let cfg: LoopConfigFile = from_value(tree, "loop config")?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    cfg.model.validate()?;
    let resolved = serde_json::to_value(&cfg).map_err(|e| CliError::Numerical(e.to_string()))?;
    let meta = Metadata::new("margins", path, &common.overrides, resolved);

    let table = margin_sweep(&cfg.model, ratios, cfg.sweep)?;
    let freqs = logspace(cfg.sweep.f_lo, cfg.sweep.f_hi, cfg.sweep.points);
    let mut w = csv::Writer::from_writer(Vec::new());
    for &ratio in ratios {
        for p in bode(&compose_open_loop(&cfg.model.with_ratio(ratio))?, &freqs)? {
            w.serialize(BodeRow {
                ratio,
                f: p.f,
                magnitude_db: p.magnitude_db,
                phase_deg: p.phase_deg,
                at_pole: p.at_pole,
            })
            .map_err(csv_error)?;
        }
    }
    ensure_dir(&common.out)?;
    write_file(&common.out, "bode.csv", &w.into_inner().map_err(|e| CliError::Numerical(e.to_string()))?)?;
    write_json(&common.out, "margins.json", &MarginsReport { metadata: &meta, table: &table })?;

    common.say(format!(
        "{:>8} {:>10} {:>10} {:>10} {:>10} {:>7}",
        "ratio", "GM dB", "PM deg", "f_gc Hz", "f_pc Hz", "stable"
    ));
    for row in &table.rows {
        let r = &row.report;
        common.say(format!(
            "{:>8} {:>10} {:>10} {:>10} {:>10} {:>7}",
            row.ratio,
            fmt_opt(r.gain_margin_db, 2),
            fmt_opt(r.phase_margin_deg, 2),
            fmt_opt(r.gain_crossover, 3),
            fmt_opt(r.phase_crossover, 3),
            r.stable
        ));
    }
    common.say(format!("gain margin nondecreasing in ratio: {}", table.gain_margin_monotone));
    Ok(())
}
