//! FIR filter design, streaming filtering and transport delay lines.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub const DEFAULT_LOWPASS_TAPS: usize = 101;
pub const DEFAULT_BANDPASS_TAPS: usize = 601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirKind {
    Lowpass,
    Bandpass,
}

/// Designed linear-phase FIR filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FirSpec {
    taps: Vec<f64>,
    sample_rate: f64,
    kind: FirKind,
    band: (f64, f64),
}

/// Header-friendly description of a filter (taps omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMeta {
    pub kind: FirKind,
    pub band: (f64, f64),
    pub order: usize,
    pub fs: f64,
}

impl FirSpec {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn kind(&self) -> FirKind {
        self.kind
    }

    /// Pass band (lo, hi) in Hz; lo is 0 for a low-pass.
    pub fn band(&self) -> (f64, f64) {
        self.band
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Constant group delay in samples, (N − 1)/2.
    pub fn group_delay_samples(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    pub fn group_delay(&self) -> f64 {
        self.group_delay_samples() as f64 / self.sample_rate
    }

    pub fn meta(&self) -> FilterMeta {
        FilterMeta {
            kind: self.kind,
            band: self.band,
            order: self.taps.len(),
            fs: self.sample_rate,
        }
    }

    /// H(e^{j2πf/fs}) evaluated directly from the taps.
    pub fn response(&self, f: f64) -> Result<Complex64> {
        let nyquist = self.sample_rate / 2.0;
        if !(0.0..=nyquist).contains(&f) {
            return Err(domain(format!("frequency {f} Hz outside [0, {nyquist}] Hz")));
        }
        let w = 2.0 * PI * f / self.sample_rate;
        Ok(self
            .taps
            .iter()
            .enumerate()
            .map(|(n, &h)| h * Complex64::from_polar(1.0, -w * n as f64))
            .sum())
    }
}

fn check_order(order: usize) -> Result<()> {
    if order < 11 || order % 2 == 0 {
        return Err(domain(format!("filter order must be odd and at least 11, got {order}")));
    }
    Ok(())
}

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

/// Hamming-windowed sinc with unity DC gain.
fn windowed_sinc(cutoff: f64, sample_rate: f64, order: usize) -> Vec<f64> {
    let fc = cutoff / sample_rate;
    let mid = (order - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..order)
        .map(|n| {
            let m = n as f64 - mid;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * m).sin() / (PI * m)
            };
            sinc * hamming(n, order)
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|h| *h /= sum);
    // Exact symmetry.
    for n in 0..order / 2 {
        let avg = 0.5 * (taps[n] + taps[order - 1 - n]);
        taps[n] = avg;
        taps[order - 1 - n] = avg;
    }
    taps
}

pub fn design_lowpass(cutoff: f64, sample_rate: f64, order: usize) -> Result<FirSpec> {
    check_order(order)?;
    if !(cutoff > 0.0 && cutoff < sample_rate / 2.0) {
        return Err(domain(format!(
            "cutoff {cutoff} Hz must lie strictly between 0 and Nyquist ({} Hz)",
            sample_rate / 2.0
        )));
    }
    Ok(FirSpec {
        taps: windowed_sinc(cutoff, sample_rate, order),
        sample_rate,
        kind: FirKind::Lowpass,
        band: (0.0, cutoff),
    })
}

/// Band-pass as the difference of two unity-gain low-passes; the DC gain is
/// zero by construction.
pub fn design_bandpass(f_lo: f64, f_hi: f64, sample_rate: f64, order: usize) -> Result<FirSpec> {
    check_order(order)?;
    if !(f_lo > 0.0 && f_lo < f_hi && f_hi < sample_rate / 2.0) {
        return Err(domain(format!(
            "band ({f_lo}, {f_hi}) Hz must satisfy 0 < lo < hi < Nyquist ({} Hz)",
            sample_rate / 2.0
        )));
    }
    let hi = windowed_sinc(f_hi, sample_rate, order);
    let lo = windowed_sinc(f_lo, sample_rate, order);
    Ok(FirSpec {
        taps: hi.iter().zip(&lo).map(|(a, b)| a - b).collect(),
        sample_rate,
        kind: FirKind::Bandpass,
        band: (f_lo, f_hi),
    })
}

/// Magnitude and phase (rad) of the designed filter at `f` Hz.
pub fn frequency_response(spec: &FirSpec, f: f64) -> Result<(f64, f64)> {
    let h = spec.response(f)?;
    Ok((h.norm(), h.arg()))
}

/// Streaming FIR state. History starts zero-filled.
#[derive(Debug, Clone)]
pub struct FirFilter {
    spec: FirSpec,
    // Samples are written twice, N apart, so the last N inputs are always
    // contiguous at history[pos..pos + N] (oldest first).
    history: Vec<f64>,
    pos: usize,
}

impl FirFilter {
    pub fn new(spec: FirSpec) -> Self {
        let n = spec.len();
        Self {
            spec,
            history: vec![0.0; 2 * n],
            pos: 0,
        }
    }

    pub fn spec(&self) -> &FirSpec {
        &self.spec
    }

    pub fn step(&mut self, x: f64) -> f64 {
        let n = self.spec.len();
        self.history[self.pos] = x;
        self.history[self.pos + n] = x;
        self.pos = (self.pos + 1) % n;
        let window = &self.history[self.pos..self.pos + n];
        // taps[i] pairs with x[k − i]; window is oldest first.
        self.spec
            .taps
            .iter()
            .zip(window.iter().rev())
            .map(|(h, x)| h * x)
            .sum()
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|v| *v = 0.0);
        self.pos = 0;
    }
}

/// One streaming step, `Σ taps[i]·x[k−i]`.
pub fn filter_step(state: &mut FirFilter, x: f64) -> f64 {
    state.step(x)
}

/// Pure transport delay of round(delay·fs) samples, at least one.
#[derive(Debug, Clone)]
pub struct DelayLine {
    delay: f64,
    sample_rate: f64,
    buffer: Vec<f64>,
    pos: usize,
}

impl DelayLine {
    pub fn new(delay: f64, sample_rate: f64) -> Result<Self> {
        if !(delay >= 0.0 && delay.is_finite()) || !(sample_rate > 0.0) {
            return Err(domain(format!(
                "delay {delay} s and sample rate {sample_rate} Hz must be non-negative / positive"
            )));
        }
        let len = ((delay * sample_rate).round() as usize).max(1);
        Ok(Self {
            delay,
            sample_rate,
            buffer: vec![0.0; len],
            pos: 0,
        })
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len_samples(&self) -> usize {
        self.buffer.len()
    }

    pub fn step(&mut self, x: f64) -> f64 {
        let out = std::mem::replace(&mut self.buffer[self.pos], x);
        self.pos = (self.pos + 1) % self.buffer.len();
        out
    }

    /// Pre-fill with a constant, as if the input had been `value` forever.
    pub fn fill(&mut self, value: f64) {
        self.buffer.iter_mut().for_each(|v| *v = value);
    }
}

pub fn delay_step(line: &mut DelayLine, x: f64) -> f64 {
    line.step(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rustfft::FftPlanner;

    fn probe_band() -> FirSpec {
        design_bandpass(8.0, 22.0, 1000.0, DEFAULT_BANDPASS_TAPS).unwrap()
    }

    fn gain(spec: &FirSpec, f: f64) -> f64 {
        frequency_response(spec, f).unwrap().0
    }

    fn batch_convolve(taps: &[f64], x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                (0..taps.len())
                    .filter(|&i| i <= k)
                    .map(|i| taps[i] * x[k - i])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn lowpass_dc_and_cutoff() {
        let lp = design_lowpass(8.0, 1000.0, DEFAULT_LOWPASS_TAPS).unwrap();
        let dc = gain(&lp, 0.0);
        assert!((0.999..=1.001).contains(&dc), "{dc}");
        // 101 taps smear an 8 Hz edge (reference value from an independent
        // numpy design); the −6 dB point sits on the cutoff once the filter
        // resolves it.
        let at_cutoff = gain(&lp, 8.0);
        assert!((at_cutoff - 0.674_006_471).abs() < 1e-6, "{at_cutoff}");
        let long = design_lowpass(8.0, 1000.0, 301).unwrap();
        assert!((gain(&long, 8.0) - 0.5).abs() < 1e-3);
        assert_eq!(lp.taps().iter().sum::<f64>().round(), 1.0);
    }

    #[test]
    fn lowpass_stopband_when_resolvable() {
        // 101 taps resolve a 50 Hz cutoff; 8 Hz needs a longer filter.
        for (fc, taps) in [(50.0, 101), (8.0, 301)] {
            let lp = design_lowpass(fc, 1000.0, taps).unwrap();
            let worst = (0..=1000)
                .map(|i| 2.0 * fc + i as f64 * (500.0 - 2.0 * fc) / 1000.0)
                .map(|f| gain(&lp, f))
                .fold(0.0, f64::max);
            assert!(worst <= 0.01, "fc {fc}: {worst}");
        }
    }

    #[test]
    fn lowpass_constant_input_settles() {
        let mut f = FirFilter::new(design_lowpass(8.0, 1000.0, 101).unwrap());
        let mut y = 0.0;
        for _ in 0..101 {
            y = f.step(2.5);
        }
        assert!((y - 2.5).abs() < 1e-12);
    }

    #[test]
    fn design_preconditions() {
        assert!(design_lowpass(8.0, 1000.0, 100).is_err());
        assert!(design_lowpass(8.0, 1000.0, 9).is_err());
        assert!(design_lowpass(500.0, 1000.0, 101).is_err());
        assert!(design_bandpass(18.0, 8.0, 1000.0, 201).is_err());
        assert!(design_bandpass(0.0, 8.0, 1000.0, 201).is_err());
        assert!(design_bandpass(8.0, 600.0, 1000.0, 201).is_err());
    }

    #[test]
    fn bandpass_contract() {
        let bp = probe_band();
        assert!(gain(&bp, 0.0) <= 0.01);
        assert!(bp.taps().iter().sum::<f64>().abs() < 1e-12);
        for i in 0..=60 {
            let f = 10.0 + 0.1 * i as f64;
            assert!(gain(&bp, f) >= 0.9, "{f} Hz: {}", gain(&bp, f));
        }
        assert!(gain(&bp, (8.0f64 * 22.0).sqrt()) >= 0.9);
        assert!(gain(&bp, 13.0) >= 0.9);
        // 0.5 Hz surface pulsation: at least 40 dB down.
        assert!(gain(&bp, 0.5) <= 0.01, "{}", gain(&bp, 0.5));
        for i in 0..=460 {
            let f = 44.0 + i as f64;
            assert!(gain(&bp, f.min(500.0)) <= 0.01);
        }
    }

    #[test]
    fn short_bandpass_centre_gain() {
        let bp = design_bandpass(8.0, 22.0, 1000.0, 201).unwrap();
        assert!(gain(&bp, (8.0f64 * 22.0).sqrt()) >= 0.9);
        assert!(gain(&bp, 0.5) <= 0.01);
    }

    #[test]
    fn bandpass_dc_rejection_streaming() {
        let mut f = FirFilter::new(probe_band());
        let mut y = 1.0;
        for _ in 0..700 {
            y = f.step(3.0);
        }
        assert!(y.abs() < 1e-10);
    }

    #[test]
    fn impulse_response_is_taps() {
        let spec = design_lowpass(30.0, 1000.0, 21).unwrap();
        let mut f = FirFilter::new(spec.clone());
        let out: Vec<f64> = (0..21).map(|k| f.step(if k == 0 { 1.0 } else { 0.0 })).collect();
        assert_eq!(out, spec.taps());
        let mut z = FirFilter::new(spec);
        assert!((0..50).all(|_| z.step(0.0) == 0.0));
    }

    #[test]
    fn taps_are_symmetric() {
        for spec in [probe_band(), design_lowpass(8.0, 1000.0, 101).unwrap()] {
            let t = spec.taps();
            for i in 0..t.len() {
                assert!((t[i] - t[t.len() - 1 - i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn group_delay_is_half_length() {
        // A sinusoid inside the pass band comes out shifted by (N − 1)/2 samples.
        let spec = probe_band();
        assert_eq!(spec.group_delay_samples(), 300);
        let mut f = FirFilter::new(spec.clone());
        let fs = 1000.0;
        let w = 2.0 * PI * 15.0 / fs;
        let g = gain(&spec, 15.0);
        for k in 0..2000 {
            let y = f.step((w * k as f64).sin());
            if k > 700 {
                let expected = g * (w * (k as f64 - 300.0)).sin();
                assert!((y - expected).abs() < 1e-9, "k {k}");
            }
        }
    }

    #[test]
    fn response_matches_fft() {
        let spec = probe_band();
        let m = 4096;
        let mut buf: Vec<rustfft::num_complex::Complex<f64>> = (0..m)
            .map(|i| rustfft::num_complex::Complex::new(spec.taps().get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(m).process(&mut buf);
        for (k, h) in buf.iter().enumerate().take(m / 2 + 1) {
            let f = k as f64 * 1000.0 / m as f64;
            let direct = spec.response(f).unwrap();
            assert!((direct.re - h.re).abs() < 1e-9 && (direct.im - h.im).abs() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn response_rejects_above_nyquist() {
        assert!(frequency_response(&probe_band(), 500.1).is_err());
        assert!(frequency_response(&probe_band(), -1.0).is_err());
    }

    #[test]
    fn meta_serializes() {
        let json = serde_json::to_string(&probe_band().meta()).unwrap();
        assert_eq!(json, r#"{"kind":"bandpass","band":[8.0,22.0],"order":601,"fs":1000.0}"#);
    }

    #[test]
    fn delay_line_step_arrives_on_time() {
        let mut d = DelayLine::new(0.1, 1000.0).unwrap();
        assert_eq!(d.len_samples(), 100);
        let out: Vec<f64> = (0..200).map(|_| d.step(1.0)).collect();
        assert!(out[..100].iter().all(|&v| v == 0.0));
        assert!(out[100..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_delay_floors_to_one_sample() {
        let mut d = DelayLine::new(0.0, 1000.0).unwrap();
        assert_eq!(d.len_samples(), 1);
        assert_eq!(d.step(4.0), 0.0);
        assert_eq!(d.step(5.0), 4.0);
    }

    #[test]
    fn delay_phase_shift() {
        // Output lags by round(T_d·fs) samples: phase −2πf·T_d up to one sample.
        let (fs, td, f) = (1000.0, 0.1004, 3.0);
        let mut d = DelayLine::new(td, fs).unwrap();
        let w = 2.0 * PI * f;
        let (mut c, mut s) = (0.0, 0.0);
        let n = 4000;
        for k in 0..n {
            let t = k as f64 / fs;
            let y = d.step((w * t).sin());
            if k >= 1000 {
                c += y * (w * t).cos();
                s += y * (w * t).sin();
            }
        }
        let phase = c.atan2(s);
        let quantum = w / fs;
        assert!((phase + w * td).abs() <= quantum, "{phase} vs {}", -w * td);
    }

    proptest! {
        #[test]
        fn streaming_equals_batch(xs in proptest::collection::vec(-10.0f64..10.0, 1000)) {
            let spec = design_bandpass(8.0, 22.0, 1000.0, 201).unwrap();
            let batch = batch_convolve(spec.taps(), &xs);
            let mut f = FirFilter::new(spec);
            for (k, x) in xs.iter().enumerate() {
                let y = f.step(*x);
                prop_assert!((y - batch[k]).abs() <= 1e-12);
            }
        }
    }
}
