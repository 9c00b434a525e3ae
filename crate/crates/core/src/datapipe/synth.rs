//! Desk-scale multi-subject datasets with a controllable subject shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::WindowedDataset;
use crate::error::{Error, Result};

const HARMONICS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_activities: usize,
    pub n_channels: usize,
    pub window: usize,
    pub windows_per_subject_per_class: usize,
    pub seed: u64,
    /// Scales every subject-specific distortion; 0 gives identical subjects.
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_shift() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn new(
        n_subjects: usize,
        n_activities: usize,
        n_channels: usize,
        window: usize,
        windows_per_subject_per_class: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_subjects,
            n_activities,
            n_channels,
            window,
            windows_per_subject_per_class,
            seed,
            shift: default_shift(),
            noise: default_noise(),
        }
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }
}

struct ActivityTemplate {
    /// cycles per window, per harmonic
    freqs: [f64; HARMONICS],
    /// `[channel][harmonic]`
    amps: Vec<[f64; HARMONICS]>,
    phases: Vec<[f64; HARMONICS]>,
}

struct SubjectDistortion {
    /// Row-major `n_c × n_c` channel mixing.
    mixing: Vec<f64>,
    scale: f64,
    phase: f64,
    offset: Vec<f64>,
}

fn subject_distortions(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<SubjectDistortion> {
    let n_c = spec.n_channels;
    let spread = 0.6 / (n_c as f64).sqrt();
    (0..spec.n_subjects)
        .map(|_| {
            let mixing = (0..n_c * n_c)
                .map(|i| {
                    let identity = if i / n_c == i % n_c { 1.0 } else { 0.0 };
                    let r: f64 = StandardNormal.sample(rng);
                    identity + spec.shift * spread * r
                })
                .collect();
            SubjectDistortion {
                mixing,
                scale: 1.0 + spec.shift * rng.random_range(-0.3..0.3),
                phase: spec.shift * rng.random_range(-1.0..1.0),
                offset: (0..n_c).map(|_| spec.shift * rng.random_range(-0.5..0.5)).collect(),
            }
        })
        .collect()
}

/// Generates a balanced dataset: every subject has the same number of windows
/// of every activity. Subjects are numbered `1..=n_subjects`; rows are ordered
/// by subject, then activity.
pub fn synth_subjects(spec: &SynthSpec) -> Result<WindowedDataset> {
    if spec.n_subjects == 0
        || spec.n_activities == 0
        || spec.n_channels == 0
        || spec.window == 0
        || spec.windows_per_subject_per_class == 0
    {
        return Err(Error::Invalid("synthetic dataset counts must be >= 1".into()));
    }
    let n_c = spec.n_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let templates: Vec<ActivityTemplate> = (0..spec.n_activities)
        .map(|a| ActivityTemplate {
            freqs: std::array::from_fn(|h| (a + 1) as f64 * 0.75 * (h + 1) as f64 + rng.random_range(0.0..0.5)),
            amps: (0..n_c)
                .map(|_| std::array::from_fn(|_| rng.random_range(0.2..1.0)))
                .collect(),
            phases: (0..n_c)
                .map(|_| std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)))
                .collect(),
        })
        .collect();

    let distortions = subject_distortions(spec, &mut rng);

    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let n = spec.n_subjects * spec.n_activities * spec.windows_per_subject_per_class;
    let mut x = Vec::with_capacity(n * n_c * spec.window);
    let mut y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut clean = vec![0.0; n_c * spec.window];

    for (subject, dist) in distortions.iter().enumerate() {
        for (activity, tpl) in templates.iter().enumerate() {
            for _ in 0..spec.windows_per_subject_per_class {
                let jitter = rng.random_range(0.0..std::f64::consts::TAU);
                for c in 0..n_c {
                    for t in 0..spec.window {
                        let u = t as f64 / spec.window as f64;
                        clean[c * spec.window + t] = (0..HARMONICS)
                            .map(|h| {
                                let arg = std::f64::consts::TAU * tpl.freqs[h] * u
                                    + tpl.phases[c][h]
                                    + (h + 1) as f64 * (jitter + dist.phase);
                                tpl.amps[c][h] * arg.sin()
                            })
                            .sum();
                    }
                }
                for c in 0..n_c {
                    for t in 0..spec.window {
                        let mixed: f64 = (0..n_c)
                            .map(|k| dist.mixing[c * n_c + k] * clean[k * spec.window + t])
                            .sum();
                        let v = dist.scale * mixed + dist.offset[c] + noise.sample(&mut rng);
                        x.push(v as f32);
                    }
                }
                y.push(activity);
                s.push(subject as i32 + 1);
            }
        }
    }
    WindowedDataset::from_parts(x, y, s, n_c, spec.window, spec.n_activities)
}
