use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{OfficialSubset, RespiratoryCycle, SplitListing};
use crate::error::{Error, Result};
use crate::Class;

/// Parameters of the generated corpus. Every patient contributes one cycle of
/// each class, so `n_per_class` is also the number of patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    /// Seconds per cycle.
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n_per_class: 50, duration: 4.0, sample_rate: 4000, seed: 7 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.sample_rate < 2000 {
            return Err(Error::Config("sample_rate must be at least 2000 Hz".into()));
        }
        Ok(())
    }
}

/// Breathing-noise band shared by every class.
const NOISE_BAND: (f64, f64) = (100.0, 1500.0);
const BREATH_HZ: f64 = 0.25;
const NOISE_GAIN: (f64, f64) = (0.03, 0.06);
const CRACKLES: (usize, usize) = (3, 8);
/// Burst length in seconds.
const CRACKLE_LEN: (f64, f64) = (0.004, 0.016);
const CRACKLE_AMP: (f64, f64) = (0.3, 0.6);
const WHEEZE_HZ: (f64, f64) = (200.0, 800.0);
const WHEEZE_LEN: (f64, f64) = (1.5, 3.0);
const WHEEZE_AMP: (f64, f64) = (0.5, 0.8);
const FADE: f64 = 0.01;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<RespiratoryCycle>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sr = spec.sample_rate as f64;
    let n = (spec.duration * sr).round() as usize;
    let mut out = Vec::with_capacity(4 * spec.n_per_class);
    for p in 0..spec.n_per_class {
        let patient = patient_id(p);
        let recording = recording_id(p);
        for class in Class::ALL {
            let mut x = breathing_noise(&mut rng, n, sr);
            if matches!(class, Class::Crackle | Class::Both) {
                add_crackles(&mut rng, &mut x, sr);
            }
            if matches!(class, Class::Wheeze | Class::Both) {
                add_wheeze(&mut rng, &mut x, sr);
            }
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
            // Stored at f32 precision so a written-and-reingested corpus is identical.
            let samples = x.iter().map(|v| (v * scale) as f32 as f64).collect();
            let t_begin = class.index() as f64 * spec.duration;
            out.push(RespiratoryCycle {
                samples,
                sample_rate: spec.sample_rate,
                label: class,
                patient_id: patient.clone(),
                recording_id: recording.clone(),
                chest_location: "Tc".into(),
                device: "Synth".into(),
                t_begin,
                t_end: t_begin + spec.duration,
                index: class.index(),
            });
        }
    }
    Ok(out)
}

/// Official-style train/test listing for a synthetic corpus: 40% of the
/// patients, chosen with the spec's seed, are test patients.
pub fn synthetic_listing(spec: &SyntheticSpec) -> SplitListing {
    let mut patients: Vec<usize> = (0..spec.n_per_class).collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(LISTING_SALT)));
    let n_test = (0.4 * spec.n_per_class as f64).round() as usize;
    patients
        .iter()
        .enumerate()
        .map(|(rank, &p)| (recording_id(p), if rank < n_test { OfficialSubset::Test } else { OfficialSubset::Train }))
        .collect()
}

const LISTING_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn patient_id(p: usize) -> String {
    format!("{}", 1001 + p)
}

fn recording_id(p: usize) -> String {
    format!("{}_1b1_Tc_sc_Synth", 1001 + p)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

/// Band-limited Gaussian noise with unit RMS under a slow breathing envelope.
fn breathing_noise(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut spec: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spec);
    for (k, v) in spec.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < NOISE_BAND.0 || f > NOISE_BAND.1 {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    let mut x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let gain = uniform(rng, NOISE_GAIN) / rms;
    let phase = uniform(rng, (0.0, PI));
    for (i, v) in x.iter_mut().enumerate() {
        let s = (PI * BREATH_HZ * i as f64 / sr + phase).sin();
        *v *= gain * (0.2 + 0.8 * s * s);
    }
    x
}

/// Short exponentially decaying white-noise clicks.
fn add_crackles(rng: &mut ChaCha8Rng, x: &mut [f64], sr: f64) {
    let count = rng.gen_range(CRACKLES.0..=CRACKLES.1);
    for _ in 0..count {
        let len = ((uniform(rng, CRACKLE_LEN) * sr) as usize).clamp(2, x.len());
        let start = rng.gen_range(0..=x.len() - len);
        let amp = uniform(rng, CRACKLE_AMP);
        let tau = len as f64 / 4.0;
        for j in 0..len {
            let z: f64 = rng.sample(StandardNormal);
            x[start + j] += amp * z.clamp(-2.5, 2.5) / 2.5 * (-(j as f64) / tau).exp();
        }
    }
}

/// A sustained tone with short raised-cosine fades.
fn add_wheeze(rng: &mut ChaCha8Rng, x: &mut [f64], sr: f64) {
    let freq = uniform(rng, WHEEZE_HZ);
    let len = ((uniform(rng, WHEEZE_LEN) * sr) as usize).min(x.len());
    let start = rng.gen_range(0..=x.len() - len);
    let amp = uniform(rng, WHEEZE_AMP);
    let phase = uniform(rng, (0.0, 2.0 * PI));
    let fade = ((FADE * sr) as usize).max(1).min(len / 2);
    for j in 0..len {
        let edge = j.min(len - 1 - j);
        let w = if edge < fade { 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos() } else { 1.0 };
        x[start + j] += amp * w * (2.0 * PI * freq * j as f64 / sr + phase).sin();
    }
}
