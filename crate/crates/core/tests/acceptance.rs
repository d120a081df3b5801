//! One line per acceptance criterion; exits non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use impedance_core::contact::{hertz_tangent_stiffness, ContactLaw, HertzParams, SpringDamperParams};
use impedance_core::control::{ForceLoop, ForceLoopConfig, InnerLoopModel, PiGains};
use impedance_core::estimator::{
    batch_ls, bilinear_response, make_regressor, recover_impedance, EstimatorConfig, RegressorSample, RlsState,
};
use impedance_core::probe::{run_open_loop, validate_high_freq_reduction, OpenLoopProbe, ProbeConfig, Traverse};
use impedance_core::sim::{gradient_field, run, spectral_peak, trace_csv_string, ScenarioConfig};
use impedance_core::stability::{compose_open_loop, margin_sweep, margins, LoopModel, Sweep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn rls_vs_batch(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d: Vec<f64> = (0..201).map(|_| 1e-3 * rng.random_range(-1.0..1.0)).collect();
    let f = bilinear_response(1000.0, 1.0, 1e-3, &d);
    let samples: Vec<RegressorSample> = (1..d.len())
        .map(|k| make_regressor(f[k], f[k - 1], d[k], d[k - 1]).unwrap())
        .collect();
    let mut s = RlsState::new(&EstimatorConfig::probe(), 1e-3).unwrap();
    for x in &samples {
        s.update(x);
    }
    let batch = batch_ls(&samples).unwrap();
    let rls = recover_impedance(&s.theta, 1e-3).unwrap();
    let ls = recover_impedance(&batch, 1e-3).unwrap();
    let k_err = (rls.stiffness / ls.stiffness - 1.0).abs();
    let d_err = (rls.damping / ls.damping - 1.0).abs();
    // Round trip through an independently written forward map.
    let (a, b) = ((2.0 * 1.0 + 1e-3 * 1000.0) / 1e-3, (-2.0 * 1.0 + 1e-3 * 1000.0) / 1e-3);
    let back = recover_impedance(&nalgebra::Vector2::new(a, b), 1e-3).unwrap();
    let trip = (back.stiffness - 1000.0).abs().max((back.damping - 1.0).abs());
    let secs = start.elapsed().as_secs_f64();
    r.line(
        "1 rls-batch",
        k_err < 0.01 && d_err < 0.01 && trip < 1e-9 && secs < 1.0,
        format!("K err {k_err:.2e}, D err {d_err:.2e} at sample 200, round trip {trip:.1e}, {secs:.3} s"),
    );
}

fn probe_identification(r: &mut Report) {
    let spring = |k| ContactLaw::SpringDamper(SpringDamperParams { stiffness: k, damping: 0.0 });
    let ticks = run_open_loop(&OpenLoopProbe::default(), |_| Ok(spring(1000.0))).unwrap();
    let k = ticks.last().unwrap().estimate.unwrap().stiffness;
    let lin = (k / 1000.0 - 1.0).abs();

    let h = HertzParams::new(0.005, 5e4, 0.45).unwrap();
    let run = OpenLoopProbe { base_depth: 2e-3, ..Default::default() };
    let ticks = run_open_loop(&run, |_| Ok(ContactLaw::Hertz(h))).unwrap();
    let kh = ticks.last().unwrap().estimate.unwrap().stiffness;
    let oracle = hertz_tangent_stiffness(&h, run.base_depth + run.probe.amplitude / 2.0).unwrap();
    let herr = (kh / oracle - 1.0).abs();
    r.line(
        "2 probe-identification",
        lin < 0.02 && herr < 0.05,
        format!("linear K {k:.1} (err {:.2}%), Hertz {kh:.1} vs {oracle:.1} (err {:.2}%)", lin * 100.0, herr * 100.0),
    );
}

fn frequency_sweep(r: &mut Report) {
    let field = gradient_field(2000.0, 1e5, 0.03, 0.05, 0.03, 5e-4).unwrap();
    let path = Traverse { x_start: 0.005, y: 0.0, speed: 0.005, dwell: 8.0, score_range: (0.025, 0.085) };
    let freqs: Vec<f64> = (0..5).map(|i| 2.0 * 10f64.powf(i as f64 / 4.0)).collect();
    let errs: Vec<f64> = freqs
        .iter()
        .map(|&f| {
            let run = OpenLoopProbe {
                probe: ProbeConfig { frequency: f, ..Default::default() },
                estimator: EstimatorConfig::probe_with_gain(2e7),
                duration: 26.0,
                base_depth: 3e-3,
                ..Default::default()
            };
            validate_high_freq_reduction(&field, &path, &run).unwrap().rel_error_rms
        })
        .collect();
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let noisy = {
        let run = OpenLoopProbe {
            estimator: EstimatorConfig::probe_with_gain(2e7),
            duration: 26.0,
            base_depth: 3e-3,
            noise_sigma: 0.02,
            seed: 5,
            ..Default::default()
        };
        validate_high_freq_reduction(&field, &path, &run).unwrap().rel_error_rms
    };
    let shown: Vec<String> = freqs.iter().zip(&errs).map(|(f, e)| format!("{f:.1}Hz {e:.4}")).collect();
    r.line(
        "3 frequency-sweep",
        monotone,
        format!("rel error rms [{}], 20 Hz with 0.02 N noise {noisy:.4}", shown.join(", ")),
    );
}

fn diverges(model: &LoopModel) -> bool {
    // No integral clamp, so an unstable loop grows instead of settling into a limit cycle.
    let pi = PiGains { integral_limit: f64::INFINITY, ..model.pi };
    let cfg = ForceLoopConfig { pi: Some(pi), inner: model.inner, delay: model.delay, ..Default::default() };
    let mut l = ForceLoop::new(&cfg, 1e-3, 0.0).unwrap();
    let k_hat = 1.0 / model.compliance_est;
    let mut f = 0.0;
    let mut early: f64 = 0.0;
    let mut late: f64 = 0.0;
    for k in 0..10_000 {
        let tick = l.step(5.0, f, k_hat).unwrap();
        f = model.true_stiffness * tick.x;
        if !f.is_finite() {
            return true;
        }
        let e = (f - 5.0).abs();
        match k {
            4000..6000 => early = early.max(e),
            8000.. => late = late.max(e),
            _ => {}
        }
    }
    late > early && late > 1e-6
}

fn stability(r: &mut Report) {
    let m = LoopModel::default();
    let sweep = Sweep::default();
    let table = margin_sweep(&m, &[0.1, 0.5, 1.0, 2.0, 10.0], sweep).unwrap();
    let gm = |i: usize| table.rows[i].report.gain_margin_db;
    let matched = &table.rows[2].report;
    let matched_ok = matched.gain_margin_db.is_some_and(|g| g > 0.0) && matched.phase_margin_deg.is_some_and(|p| p > 0.0);
    let under_ok = gm(0).is_some_and(|g| g < 0.0);
    let fmt = |g: Option<f64>| g.map_or("inf".to_string(), |g| format!("{g:.2}"));

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut agree = 0;
    let mut tried = 0;
    let mut unstable = 0;
    while tried < 10 {
        let inner = InnerLoopModel {
            natural_frequency: rng.random_range(150.0..400.0),
            damping_ratio: rng.random_range(0.6..1.0),
        };
        let delay = rng.random_range(0.05..0.15);
        let cfg = ForceLoopConfig { inner, delay, ..Default::default() };
        let k_true = 10f64.powf(rng.random_range(2.3..3.7));
        let ratio = 10f64.powf(rng.random_range(-1.5..0.5));
        let model = LoopModel {
            pi: cfg.gains().unwrap(),
            compliance_est: 1.0 / (ratio * k_true),
            true_stiffness: k_true,
            inner,
            delay,
        };
        let rep = margins(&compose_open_loop(&model).unwrap(), sweep).unwrap();
        // Skip models too close to the boundary for the delay approximation.
        if rep.gain_margin_db.is_some_and(|g| g.abs() < 1.5) {
            continue;
        }
        tried += 1;
        unstable += usize::from(!rep.stable);
        if rep.stable != !diverges(&model) {
            continue;
        }
        agree += 1;
    }
    r.line(
        "4 stability-margins",
        matched_ok && under_ok && table.gain_margin_monotone && agree == 10,
        format!(
            "GM by ratio [{}], PM matched {}, monotone {}, time-domain agreement {agree}/10 ({unstable} unstable)",
            (0..5).map(|i| fmt(gm(i))).collect::<Vec<_>>().join(", "),
            fmt(matched.phase_margin_deg),
            table.gain_margin_monotone
        ),
    );
}

fn slider(r: &mut Report) {
    let on = ScenarioConfig::static_slider();
    let off = ScenarioConfig { controller: impedance_core::sim::ControllerConfig { adaptation: false, ..on.controller.clone() }, ..on.clone() };
    let t0 = Instant::now();
    let a = run(&on).unwrap();
    let ta = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let b = run(&off).unwrap();
    let tb = t0.elapsed().as_secs_f64();
    let (ea, eb) = (a.metrics.rms_force_error, b.metrics.rms_force_error);
    r.line(
        "5 static-slider",
        ea < 0.05 * on.force_setpoint && ea / eb < 0.5 && ta < 10.0 && tb < 10.0,
        format!("rms ON {ea:.4} N, OFF {eb:.4} N, ratio {:.3}, runtimes {ta:.2}/{tb:.2} s", ea / eb),
    );
}

fn pulsating(r: &mut Report) {
    let on = ScenarioConfig::pulsating();
    let mut off = on.clone();
    off.controller.adaptation = false;
    let mut detail = Vec::new();
    let mut peaks = true;
    let mut rms = [0.0; 2];
    for (i, cfg) in [&on, &off].into_iter().enumerate() {
        let out = run(cfg).unwrap();
        rms[i] = out.metrics.rms_force_error;
        let e: Vec<f64> = out.trace[out.trace.len() / 5..].iter().map(|t| t.f_env - t.f_d).collect();
        let p = spectral_peak(&e, cfg.dt, 0.5, 0.1, 5.0).unwrap();
        let df = 1.0 / (e.len() as f64 * cfg.dt);
        peaks &= (p.peak_frequency - 0.5).abs() <= df && p.prominence > 10.0;
        detail.push(format!("peak {:.3} Hz x{:.0}", p.peak_frequency, p.prominence));
    }
    r.line(
        "6 pulsating",
        rms[0] < rms[1] && peaks,
        format!("rms ON {:.3} N, OFF {:.3} N, ON {}, OFF {}", rms[0], rms[1], detail[0], detail[1]),
    );
}

fn bandpass(r: &mut Report) {
    let spec = ProbeConfig::default().bandpass(1000.0).unwrap();
    let reject = spec.response(0.5).unwrap().norm();
    let pass = spec.response(20.0).unwrap().norm();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut filt = impedance_core::signal::FirFilter::new(spec.clone());
    let taps = spec.taps();
    let worst = x
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let batch: f64 = (0..taps.len().min(k + 1)).map(|j| taps[j] * x[k - j]).sum();
            (filt.step(v) - batch).abs()
        })
        .fold(0.0, f64::max);
    let db = -20.0 * reject.log10();
    r.line(
        "7 bandpass",
        db >= 40.0 && pass >= 0.9 && worst <= 1e-12,
        format!("0.5 Hz rejection {db:.1} dB, 20 Hz gain {pass:.4}, streaming vs batch {worst:.1e}"),
    );
}

fn reproducibility(r: &mut Report) {
    let mut cfg = ScenarioConfig::static_slider();
    cfg.duration = 5.0;
    let a = trace_csv_string(&run(&cfg).unwrap().trace).unwrap();
    let b = trace_csv_string(&run(&cfg).unwrap().trace).unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let mut golden = Vec::new();
    for (name, cfg) in golden_scenarios() {
        let want = std::fs::read_to_string(data.join(format!("{name}.csv")));
        let got = trace_csv_string(&run(&cfg).unwrap().trace).unwrap();
        golden.push((name, want.is_ok_and(|w| w == got)));
    }
    r.line(
        "8 reproducibility",
        a == b && golden.iter().all(|g| g.1),
        format!("same seed identical {}, golden {:?}", a == b, golden),
    );
}

#[path = "common/golden.rs"]
mod golden;
use golden::golden_scenarios;

fn main() {
    let mut r = Report { failed: 0 };
    rls_vs_batch(&mut r);
    probe_identification(&mut r);
    frequency_sweep(&mut r);
    stability(&mut r);
    slider(&mut r);
    pulsating(&mut r);
    bandpass(&mut r);
    reproducibility(&mut r);
    if r.failed > 0 {
        eprintln!("{} criteria failed", r.failed);
        std::process::exit(1);
    }
}
