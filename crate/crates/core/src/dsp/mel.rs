use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Slaney-style mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        m * F_SP
    }
}

/// Triangular filters with unit peak, stored sparsely as `(first_bin, weights)`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub filters: Vec<(usize, Vec<f64>)>,
    /// Centre frequency of each filter in Hz.
    pub centres: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Self {
        let (m0, m1) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m0 + (m1 - m0) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sample_rate / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let w: Vec<(usize, f64)> = (0..n_bins)
                    .map(|k| {
                        let f = bin_hz(k);
                        (k, ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0))
                    })
                    .filter(|(_, v)| *v > 0.0)
                    .collect();
                match w.first() {
                    Some(&(k0, _)) => (k0, w.iter().map(|(_, v)| *v).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        MelFilterbank { filters, centres: edges[1..=n_mels].to_vec() }
    }

    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        for (o, (k0, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&spectrum[*k0..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Magnitude STFT with a periodic Hann window and centred, reflect-padded framing.
/// Returns `[n_frames][n_fft/2 + 1]`.
pub struct Stft {
    window: Vec<f64>,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let window = (0..n_fft).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos()).collect();
        Stft { window, hop, fft: FftPlanner::new().plan_fft_forward(n_fft) }
    }

    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn magnitudes(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n_fft = self.window.len();
        let pad = n_fft / 2;
        let n = x.len();
        let reflect = |i: isize| -> f64 {
            let mut i = i;
            let period = 2 * (n as isize - 1);
            if period == 0 {
                return x[0];
            }
            i = i.rem_euclid(period);
            x[if i < n as isize { i } else { period - i } as usize]
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        (0..self.n_frames(n))
            .map(|t| {
                let start = (t * self.hop) as isize - pad as isize;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(reflect(start + j as isize) * self.window[j], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect()
            })
            .collect()
    }
}

/// `ln(mel + floor)` as `[n_mels × n_frames]`.
pub fn log_mel(x: &[f64], stft: &Stft, bank: &MelFilterbank, floor: f64) -> Array2<f64> {
    let frames = stft.magnitudes(x);
    let n_mels = bank.filters.len();
    let mut out = Array2::zeros((n_mels, frames.len()));
    let mut mel = vec![0.0; n_mels];
    for (t, spec) in frames.iter().enumerate() {
        bank.apply(spec, &mut mel);
        for (m, v) in mel.iter().enumerate() {
            out[[m, t]] = (v + floor).ln();
        }
    }
    out
}
