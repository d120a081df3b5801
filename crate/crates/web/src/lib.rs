//! Browser bindings. Each export returns a JSON string; the `*_json`
//! functions underneath are plain Rust so they can be tested natively.

use impedance_core::estimator::{bilinear_theta, make_regressor, EstimatorConfig, Forgetting, RlsState};
use impedance_core::sim::{run, Metrics, RunStatus, ScenarioConfig};
use impedance_core::stability::{bode, compose_open_loop, logspace, margins, BodePoint, LoopModel, MarginReport, Sweep};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Upper bound on points per returned series.
const MAX_POINTS: usize = 1500;

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct BodeOut {
    ratio: f64,
    points: Vec<BodePoint>,
    report: MarginReport,
}

/// Bode data and margins of the default loop at one K̂/K_E ratio.
pub fn bode_json(ratio: f64) -> Result<String, String> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(format!("ratio {ratio} must be positive"));
    }
    let sweep = Sweep::default();
    let tf = compose_open_loop(&LoopModel::default().with_ratio(ratio)).map_err(|e| e.to_string())?;
    let points = bode(&tf, &logspace(sweep.f_lo, sweep.f_hi, 400)).map_err(|e| e.to_string())?;
    let report = margins(&tf, sweep).map_err(|e| e.to_string())?;
    to_json(&BodeOut { ratio, points, report })
}

#[derive(Serialize, Default)]
struct Series {
    t: Vec<f64>,
    x_e: Vec<f64>,
    force: Vec<f64>,
    setpoint: Vec<f64>,
    k_true: Vec<f64>,
    k_used: Vec<f64>,
}

#[derive(Serialize)]
struct SimOut {
    scenario: String,
    adaptation: bool,
    metrics: Metrics,
    status: RunStatus,
    series: Series,
}

/// Runs `slider` or `pulsating` with adaptation on or off and returns a
/// downsampled trace.
pub fn simulate_json(scenario: &str, adaptation: bool, seed: u64) -> Result<String, String> {
    let mut cfg = match scenario {
        "slider" => ScenarioConfig::static_slider(),
        "pulsating" => ScenarioConfig::pulsating(),
        other => return Err(format!("unknown scenario `{other}`")),
    };
    cfg.controller.adaptation = adaptation;
    cfg.seed = seed;
    let out = run(&cfg).map_err(|e| e.to_string())?;
    let stride = out.trace.len().div_ceil(MAX_POINTS).max(1);
    let mut s = Series::default();
    for r in out.trace.iter().step_by(stride) {
        s.t.push(r.t);
        s.x_e.push(r.x_e);
        s.force.push(r.f_env);
        s.setpoint.push(r.f_d);
        s.k_true.push(r.k_true);
        s.k_used.push(r.k_hat_used);
    }
    to_json(&SimOut {
        scenario: scenario.into(),
        adaptation,
        metrics: out.metrics,
        status: out.status,
        series: s,
    })
}

#[derive(Serialize, Default)]
struct RlsOut {
    t: Vec<f64>,
    k_true: Vec<f64>,
    k_hat: Vec<f64>,
    d_hat: Vec<f64>,
    mu: Vec<f64>,
}

/// Tracks a stiffness step from `k_before` to `k_after` halfway through a
/// 4 s record sampled at 1 kHz. `lambda` of 0 selects adaptive
/// forgetting, otherwise fixed forgetting with that factor.
pub fn rls_json(k_before: f64, k_after: f64, damping: f64, lambda: f64) -> Result<String, String> {
    let period = 1e-3;
    let n = 4000;
    let mut cfg = EstimatorConfig::probe();
    if lambda != 0.0 {
        cfg.forgetting = Forgetting::Fixed(lambda);
    }
    let mut rls = RlsState::new(&cfg, period).map_err(|e| e.to_string())?;

    let delta = |t: f64| {
        use std::f64::consts::TAU;
        5e-5 * ((TAU * 20.0 * t).sin() + 0.5 * (TAU * 7.3 * t).sin())
    };
    let mut out = RlsOut::default();
    let (mut d_prev, mut f_prev) = (delta(0.0), 0.0);
    for k in 1..=n {
        let t = k as f64 * period;
        let stiffness = if k < n / 2 { k_before } else { k_after };
        let theta = bilinear_theta(stiffness, damping, period);
        let d = delta(t);
        let f = theta[0] * d + theta[1] * d_prev - f_prev;
        let s = make_regressor(f, f_prev, d, d_prev).map_err(|e| e.to_string())?;
        let info = rls.update(&s);
        let e = rls.estimate(t, info.innovation);
        if k % (n / MAX_POINTS).max(1) == 0 {
            out.t.push(t);
            out.k_true.push(stiffness);
            out.k_hat.push(e.stiffness);
            out.d_hat.push(e.damping);
            out.mu.push(info.mu);
        }
        (d_prev, f_prev) = (d, f);
    }
    to_json(&out)
}

fn js<T>(r: Result<T, String>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = bode)]
pub fn bode_js(ratio: f64) -> Result<String, JsValue> {
    js(bode_json(ratio))
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(scenario: &str, adaptation: bool, seed: u32) -> Result<String, JsValue> {
    js(simulate_json(scenario, adaptation, seed.into()))
}

#[wasm_bindgen(js_name = trackStiffness)]
pub fn rls_js(k_before: f64, k_after: f64, damping: f64, lambda: f64) -> Result<String, JsValue> {
    js(rls_json(k_before, k_after, damping, lambda))
}
