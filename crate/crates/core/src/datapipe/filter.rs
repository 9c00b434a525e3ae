//! Butterworth band-pass as cascaded second-order sections, zero-phase
//! (forward-backward) application, and linear resampling.

use std::f64::consts::PI;

use super::RawRecording;
use crate::error::{Error, Result};

/// Second-order section in transposed direct form II, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// State that makes the section output constant for constant input `u`.
    fn steady_state(&self, u: f64) -> [f64; 2] {
        let y = self.dc_gain() * u;
        let z2 = self.b2 * u - self.a2 * y;
        let z1 = self.b1 * u - self.a1 * y + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b0 * input + z[0];
            z[0] = self.b1 * input - self.a1 * y + z[1];
            z[1] = self.b2 * input - self.a2 * y;
            *v = y;
        }
    }

    /// Magnitude response at `freq` for sample rate `fs`.
    pub fn magnitude(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let num_re = self.b0 + self.b1 * c1 + self.b2 * c2;
        let num_im = -(self.b1 * s1 + self.b2 * s2);
        let den_re = 1.0 + self.a1 * c1 + self.a2 * c2;
        let den_im = -(self.a1 * s1 + self.a2 * s2);
        ((num_re * num_re + num_im * num_im) / (den_re * den_re + den_im * den_im)).sqrt()
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Lowpass,
    Highpass,
}

/// Bilinear-transformed Butterworth sections with a prewarped corner.
fn butterworth_sections(order: usize, corner_hz: f64, fs: f64, kind: Kind) -> Vec<Biquad> {
    let k = (PI * corner_hz / fs).tan();
    let mut sections = Vec::with_capacity(order.div_ceil(2));
    for i in 0..order / 2 {
        // pole pair at angle θ from the negative real axis: s² + 2cos(θ)s + 1
        let theta = PI * (2 * i + 1) as f64 / (2 * order) as f64;
        let inv_q = 2.0 * theta.cos();
        let norm = 1.0 / (1.0 + k * inv_q + k * k);
        let a1 = 2.0 * (k * k - 1.0) * norm;
        let a2 = (1.0 - k * inv_q + k * k) * norm;
        let section = match kind {
            Kind::Lowpass => {
                let b0 = k * k * norm;
                Biquad { b0, b1: 2.0 * b0, b2: b0, a1, a2 }
            }
            Kind::Highpass => Biquad { b0: norm, b1: -2.0 * norm, b2: norm, a1, a2 },
        };
        sections.push(section);
    }
    if order % 2 == 1 {
        let norm = 1.0 / (1.0 + k);
        let a1 = (k - 1.0) * norm;
        let section = match kind {
            Kind::Lowpass => Biquad { b0: k * norm, b1: k * norm, b2: 0.0, a1, a2: 0.0 },
            Kind::Highpass => Biquad { b0: norm, b1: -norm, b2: 0.0, a1, a2: 0.0 },
        };
        sections.push(section);
    }
    sections
}

/// High-pass at `low_hz` cascaded with low-pass at `high_hz`, each of `order`.
pub fn butterworth_bandpass_sos(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Vec<Biquad>> {
    if order == 0 {
        return Err(Error::Invalid("filter order must be positive".into()));
    }
    if !(low_hz > 0.0 && low_hz < high_hz) {
        return Err(Error::Invalid(format!("band {low_hz}..{high_hz} Hz is empty")));
    }
    if !(fs > 2.0 * high_hz) {
        return Err(Error::Invalid(format!(
            "sample rate {fs} Hz must exceed twice the upper corner {high_hz} Hz"
        )));
    }
    let mut sos = butterworth_sections(order, low_hz, fs, Kind::Highpass);
    sos.extend(butterworth_sections(order, high_hz, fs, Kind::Lowpass));
    Ok(sos)
}

fn run_cascade(sos: &[Biquad], x: &mut [f64]) {
    let mut level = x[0];
    for section in sos {
        let z = section.steady_state(level);
        level *= section.dc_gain();
        section.run(x, z);
    }
}

/// Zero-phase filtering: odd extension at both ends, forward pass, reverse
/// pass, steady-state initial conditions on each pass.
pub fn filtfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 || sos.is_empty() {
        return x.to_vec();
    }
    let pad = (3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    run_cascade(sos, &mut ext);
    ext.reverse();
    run_cascade(sos, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Linear interpolation onto `out_len` uniformly spaced points spanning the input.
pub fn resample_linear(x: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || out_len == 0 {
        return Vec::new();
    }
    if x.len() == 1 || out_len == 1 {
        return vec![x[0]; out_len];
    }
    let scale = (x.len() - 1) as f64 / (out_len - 1) as f64;
    (0..out_len)
        .map(|j| {
            let pos = j as f64 * scale;
            let i = (pos.floor() as usize).min(x.len() - 2);
            let frac = pos - i as f64;
            x[i] + (x[i + 1] - x[i]) * frac
        })
        .collect()
}

/// Gesture-instance preprocessing: zero-phase band-pass, subtraction of the
/// mean of the first and last filtered values, and resampling to `out_len`.
pub fn bandpass_and_resample(
    rec: &RawRecording,
    low_hz: f64,
    high_hz: f64,
    order: usize,
    out_len: usize,
) -> Result<RawRecording> {
    if rec.len() < 3 * order {
        return Err(Error::Invalid(format!(
            "recording of {} samples is shorter than the filter warm-up of {} samples",
            rec.len(),
            3 * order
        )));
    }
    let sos = butterworth_bandpass_sos(order, low_hz, high_hz, rec.sample_rate)?;
    let n_c = rec.n_channels;
    let mut samples = vec![0.0; out_len * n_c];
    for c in 0..n_c {
        let mut filtered = filtfilt(&sos, &rec.channel(c));
        let baseline = 0.5 * (filtered[0] + filtered[filtered.len() - 1]);
        for v in &mut filtered {
            *v -= baseline;
        }
        for (t, v) in resample_linear(&filtered, out_len).into_iter().enumerate() {
            samples[t * n_c + c] = v;
        }
    }
    let scale = (rec.len() - 1) as f64 / (out_len.max(2) - 1) as f64;
    let activity = (0..out_len)
        .map(|j| rec.activity[((j as f64 * scale).round() as usize).min(rec.len() - 1)])
        .collect();
    RawRecording::new(
        samples,
        n_c,
        rec.sample_rate / scale,
        activity,
        rec.subject_id,
    )
}
