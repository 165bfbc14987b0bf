//! Front end: resampling, Butterworth band-pass, fixed-length cropping and
//! log-Mel spectrograms.

mod cache;
pub mod filter;
pub mod mel;
mod resample;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{CycleRef, RespiratoryCycle};
use crate::error::{Error, Result};
pub use cache::{read_feature_cache, write_feature_cache, FEATURE_CACHE_MAGIC};
pub use resample::resample_samples;

/// Added to Mel energies before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub target_rate: u32,
    pub bandpass_order: usize,
    pub bandpass_low: f64,
    pub bandpass_high: f64,
    /// Seconds.
    pub clip_duration: f64,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            target_rate: 4000,
            bandpass_order: 5,
            bandpass_low: 100.0,
            bandpass_high: 1800.0,
            clip_duration: 4.0,
            window: 256,
            hop: 128,
            n_mels: 128,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.target_rate as f64 / 2.0;
        if self.target_rate == 0 {
            return Err(Error::Config("target_rate must be positive".into()));
        }
        if !(self.bandpass_low > 0.0 && self.bandpass_low < self.bandpass_high && self.bandpass_high < nyquist) {
            return Err(Error::Config(format!(
                "band-pass edges {}..{} Hz must satisfy 0 < low < high < {nyquist}",
                self.bandpass_low, self.bandpass_high
            )));
        }
        if self.bandpass_order == 0 {
            return Err(Error::Config("bandpass_order must be positive".into()));
        }
        if !(self.window > self.hop && self.hop > 0) {
            return Err(Error::Config("need window > hop > 0".into()));
        }
        if self.n_mels == 0 || !(self.clip_duration > 0.0) {
            return Err(Error::Config("n_mels and clip_duration must be positive".into()));
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_duration * self.target_rate as f64).round() as usize
    }

    /// Frames produced by centred framing of one clip.
    pub fn n_frames(&self) -> usize {
        1 + self.clip_samples() / self.hop
    }

    pub fn feature_shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Seeded uniformly random window.
    Train,
    /// Centred window.
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelFeature {
    /// `[n_mels × n_frames]`, natural-log energies.
    pub values: Array2<f64>,
    pub config: DspConfig,
    pub source: CycleRef,
}

pub fn resample(cycle: &RespiratoryCycle, target_rate: u32) -> Result<RespiratoryCycle> {
    if target_rate == 0 {
        return Err(Error::Config("target_rate must be positive".into()));
    }
    if cycle.sample_rate == 0 {
        return Err(Error::Config(format!("cycle {} has sample rate 0", cycle.id())));
    }
    Ok(RespiratoryCycle {
        samples: resample_samples(&cycle.samples, cycle.sample_rate, target_rate),
        sample_rate: target_rate,
        ..cycle.clone()
    })
}

pub fn bandpass(cycle: &RespiratoryCycle, config: &DspConfig) -> Result<RespiratoryCycle> {
    let nyquist = cycle.sample_rate as f64 / 2.0;
    if !(config.bandpass_low > 0.0 && config.bandpass_low < config.bandpass_high && config.bandpass_high < nyquist) {
        return Err(Error::Config(format!(
            "band-pass edges {}..{} Hz must lie in (0, {nyquist})",
            config.bandpass_low, config.bandpass_high
        )));
    }
    let sos = filter::butter_bandpass(config.bandpass_order, config.bandpass_low, config.bandpass_high, cycle.sample_rate as f64);
    Ok(RespiratoryCycle { samples: filter::sosfiltfilt(&sos, &cycle.samples), ..cycle.clone() })
}

/// Exactly `clip_duration` seconds: shorter cycles are tiled circularly, longer
/// ones cropped at a seeded random offset (train) or centrally (test).
pub fn unify_duration(cycle: &RespiratoryCycle, config: &DspConfig, mode: CropMode, seed: u64) -> Result<RespiratoryCycle> {
    if cycle.samples.is_empty() {
        return Err(Error::Empty("cycle samples"));
    }
    let len = (config.clip_duration * cycle.sample_rate as f64).round() as usize;
    let x = &cycle.samples;
    let samples = if x.len() <= len {
        x.iter().cycle().take(len).copied().collect()
    } else {
        let slack = x.len() - len;
        let start = match mode {
            CropMode::Test => slack / 2,
            CropMode::Train => ChaCha8Rng::seed_from_u64(seed).gen_range(0..=slack),
        };
        x[start..start + len].to_vec()
    };
    Ok(RespiratoryCycle { samples, ..cycle.clone() })
}

/// Reusable STFT plan and filterbank for one configuration.
pub struct FeatureExtractor {
    config: DspConfig,
    stft: mel::Stft,
    bank: mel::MelFilterbank,
    sos: Vec<filter::Biquad>,
}

impl FeatureExtractor {
    pub fn new(config: &DspConfig) -> Result<Self> {
        config.validate()?;
        let sr = config.target_rate as f64;
        Ok(FeatureExtractor {
            config: config.clone(),
            stft: mel::Stft::new(config.window, config.hop),
            bank: mel::MelFilterbank::new(config.n_mels, config.window, sr, 0.0, sr / 2.0),
            sos: filter::butter_bandpass(config.bandpass_order, config.bandpass_low, config.bandpass_high, sr),
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &mel::MelFilterbank {
        &self.bank
    }

    /// Resampling and band-pass filtering, the crop-independent part of the pipeline.
    pub fn preprocess(&self, cycle: &RespiratoryCycle) -> Result<RespiratoryCycle> {
        let c = resample(cycle, self.config.target_rate)?;
        Ok(RespiratoryCycle { samples: filter::sosfiltfilt(&self.sos, &c.samples), ..c })
    }

    /// Log-Mel of a clip that is already exactly `clip_duration` long. Values are
    /// rounded to f32 precision so that the feature cache is lossless.
    pub fn logmel(&self, cycle: &RespiratoryCycle) -> Result<LogMelFeature> {
        let want = self.config.clip_samples();
        if cycle.samples.len() != want || cycle.sample_rate != self.config.target_rate {
            return Err(Error::Shape {
                expected: format!("{want} samples at {} Hz", self.config.target_rate),
                got: format!("{} samples at {} Hz", cycle.samples.len(), cycle.sample_rate),
            });
        }
        let mut values = mel::log_mel(&cycle.samples, &self.stft, &self.bank, LOG_FLOOR);
        values.mapv_inplace(|v| v as f32 as f64);
        Ok(LogMelFeature { values, config: self.config.clone(), source: cycle.cycle_ref() })
    }

    /// Crop and log-Mel of a cycle that has been through [`preprocess`](Self::preprocess).
    pub fn from_preprocessed(&self, cycle: &RespiratoryCycle, mode: CropMode, seed: u64) -> Result<LogMelFeature> {
        self.logmel(&unify_duration(cycle, &self.config, mode, seed)?)
    }

    /// Full pipeline from a raw cycle.
    pub fn extract(&self, cycle: &RespiratoryCycle, mode: CropMode, seed: u64) -> Result<LogMelFeature> {
        self.from_preprocessed(&self.preprocess(cycle)?, mode, seed)
    }
}

pub fn logmel(cycle: &RespiratoryCycle, config: &DspConfig) -> Result<LogMelFeature> {
    FeatureExtractor::new(config)?.logmel(cycle)
}

/// Test-mode features for every cycle, computed in parallel, in input order.
pub fn extract_all(cycles: &[RespiratoryCycle], config: &DspConfig) -> Result<Vec<LogMelFeature>> {
    use rayon::prelude::*;
    let fx = FeatureExtractor::new(config)?;
    cycles.par_iter().map(|c| fx.extract(c, CropMode::Test, 0)).collect()
}

#[cfg(test)]
mod tests;
