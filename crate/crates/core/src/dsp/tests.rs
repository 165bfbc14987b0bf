use std::f64::consts::PI;

use proptest::prelude::*;

use super::filter::{butter_bandpass, cascade_response, sosfiltfilt};
use super::mel::{hz_to_mel, mel_to_hz};
use super::*;
use crate::Class;

fn cycle(samples: Vec<f64>, rate: u32) -> RespiratoryCycle {
    RespiratoryCycle {
        samples,
        sample_rate: rate,
        label: Class::Normal,
        patient_id: "1".into(),
        recording_id: "1_1a_Tc_sc_X".into(),
        chest_location: "Tc".into(),
        device: "X".into(),
        t_begin: 0.0,
        t_end: 1.0,
        index: 0,
    }
}

fn tone(freq: f64, rate: f64, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / rate).sin()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Amplitude of the component at DFT bin `k` of `x`.
fn dft_amplitude(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let a = -2.0 * PI * k as f64 * i as f64 / n;
        re += v * a.cos();
        im += v * a.sin();
    }
    2.0 * (re * re + im * im).sqrt() / n
}

#[test]
fn resample_length_arithmetic() {
    let c = cycle(vec![0.1; 8000], 8000);
    let r = resample(&c, 4000).unwrap();
    assert_eq!(r.samples.len(), 4000);
    assert_eq!(r.sample_rate, 4000);
    assert_eq!(resample_samples(&vec![0.0; 44100], 44100, 4000).len(), 4000);
    assert_eq!(resample_samples(&vec![0.0; 1001], 3000, 4000).len(), 1335);
    assert!(resample(&c, 0).is_err());
}

#[test]
fn resample_same_rate_is_identity() {
    let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
    let c = cycle(x.clone(), 4000);
    assert_eq!(resample(&c, 4000).unwrap().samples, x);
}

#[test]
fn resampled_sine_keeps_frequency_and_amplitude() {
    let x = tone(100.0, 8000.0, 8000, 0.8);
    let y = resample_samples(&x, 8000, 4000);
    // Central 3000 samples hold exactly 75 periods of 100 Hz.
    let mid = &y[500..3500];
    let a = dft_amplitude(mid, 75);
    assert!((a - 0.8).abs() / 0.8 < 0.01, "amplitude {a}");
    for k in [50, 74, 76, 150] {
        assert!(dft_amplitude(mid, k) < 0.01 * a);
    }
    let up = resample_samples(&tone(100.0, 4000.0, 4000, 0.5), 4000, 8000);
    let a = dft_amplitude(&up[1000..7000], 75);
    assert!((a - 0.5).abs() / 0.5 < 0.01, "amplitude {a}");
}

#[test]
fn resampling_removes_content_above_new_nyquist() {
    let x = tone(3000.0, 8000.0, 8000, 0.8);
    let y = resample_samples(&x, 8000, 4000);
    assert!(rms(&y[500..3500]) < 0.01);
}

/// Analog Butterworth band-pass magnitude at the prewarped frequency.
fn analog_magnitude(f: f64, low: f64, high: f64, fs: f64, order: i32) -> f64 {
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (w, w1, w2) = (warp(f), warp(low), warp(high));
    let x = (w * w - w1 * w2) / (w * (w2 - w1));
    1.0 / (1.0 + x.powi(2 * order)).sqrt()
}

#[test]
fn bandpass_design_matches_analog_prototype() {
    let (low, high, fs) = (100.0, 1800.0, 4000.0);
    let sos = butter_bandpass(5, low, high, fs);
    assert_eq!(sos.len(), 5);
    for s in &sos {
        assert_eq!(s.b[1], 0.0);
        assert!((s.b[2] + s.b[0]).abs() < 1e-15);
        // Stability triangle of a second-order denominator.
        assert!(s.a[2].abs() < 1.0 && s.a[1].abs() < 1.0 + s.a[2], "unstable section {s:?}");
    }
    for f in [5.0, 50.0, 100.0, 200.0, 424.26, 1000.0, 1800.0, 1900.0, 1990.0] {
        let got = cascade_response(&sos, 2.0 * PI * f / fs).norm();
        let want = analog_magnitude(f, low, high, fs, 5);
        assert!((got - want).abs() < 1e-9, "{f} Hz: {got} vs {want}");
    }
    let edge = cascade_response(&sos, 2.0 * PI * low / fs).norm();
    assert!((edge - 0.5f64.sqrt()).abs() < 1e-9);
}

#[test]
fn bandpass_rejects_dc() {
    let c = cycle(vec![0.5; 16000], 4000);
    let y = bandpass(&c, &DspConfig::default()).unwrap().samples;
    assert!(y[400..15600].iter().all(|v| v.abs() < 1e-3));
}

#[test]
fn bandpass_passes_centre_and_stops_far_below() {
    let cfg = DspConfig::default();
    let centre = (cfg.bandpass_low * cfg.bandpass_high).sqrt();
    for (f, check) in [(centre, true), (0.1 * cfg.bandpass_low, false)] {
        let x = tone(f, 4000.0, 40000, 0.5);
        let y = bandpass(&cycle(x.clone(), 4000), &cfg).unwrap().samples;
        let db = 20.0 * (rms(&y[4000..36000]) / rms(&x[4000..36000])).log10();
        if check {
            assert!(db.abs() < 1.0, "centre {f} Hz: {db} dB");
        } else {
            assert!(db < -20.0, "{f} Hz: {db} dB");
        }
    }
}

#[test]
fn bandpass_is_zero_phase() {
    let x = tone(424.0, 4000.0, 8000, 0.5);
    let sos = butter_bandpass(5, 100.0, 1800.0, 4000.0);
    let y = sosfiltfilt(&sos, &x);
    // Cross-correlation peaks at lag zero.
    let corr = |lag: isize| -> f64 {
        (2000..6000).map(|i| x[i] * y[(i as isize + lag) as usize]).sum()
    };
    assert!((-3..=3).filter(|&l| l != 0).all(|l| corr(0) > corr(l)));
}

#[test]
fn bandpass_edges_are_validated() {
    let c = cycle(vec![0.0; 100], 4000);
    for (lo, hi) in [(0.0, 1800.0), (100.0, 2000.0), (1800.0, 100.0)] {
        let cfg = DspConfig { bandpass_low: lo, bandpass_high: hi, ..DspConfig::default() };
        assert!(bandpass(&c, &cfg).is_err());
    }
}

#[test]
fn unify_duration_index_arithmetic() {
    let cfg = DspConfig::default();
    let x: Vec<f64> = (0..24000).map(|i| i as f64).collect();
    let y = unify_duration(&cycle(x.clone(), 4000), &cfg, CropMode::Test, 0).unwrap();
    assert_eq!(y.samples, x[4000..20000].to_vec());

    let four: Vec<f64> = (0..16000).map(|i| i as f64).collect();
    for mode in [CropMode::Train, CropMode::Test] {
        assert_eq!(unify_duration(&cycle(four.clone(), 4000), &cfg, mode, 9).unwrap().samples, four);
    }

    let one: Vec<f64> = (0..4000).map(|i| i as f64).collect();
    let tiled: Vec<f64> = [&one[..], &one, &one, &one].concat();
    assert_eq!(unify_duration(&cycle(one, 4000), &cfg, CropMode::Test, 0).unwrap().samples, tiled);

    assert!(unify_duration(&cycle(vec![], 4000), &cfg, CropMode::Test, 0).is_err());
}

#[test]
fn train_crop_is_seeded_window() {
    let cfg = DspConfig::default();
    let x: Vec<f64> = (0..30000).map(|i| i as f64).collect();
    let c = cycle(x, 4000);
    let a = unify_duration(&c, &cfg, CropMode::Train, 5).unwrap().samples;
    assert_eq!(a, unify_duration(&c, &cfg, CropMode::Train, 5).unwrap().samples);
    let start = a[0] as usize;
    assert!(start <= 14000);
    assert_eq!(a, (start..start + 16000).map(|i| i as f64).collect::<Vec<_>>());
    let starts: std::collections::BTreeSet<usize> =
        (0..20).map(|s| unify_duration(&c, &cfg, CropMode::Train, s).unwrap().samples[0] as usize).collect();
    assert!(starts.len() > 10);
}

#[test]
fn logmel_shape_and_silence() {
    let cfg = DspConfig::default();
    assert_eq!(cfg.feature_shape(), (128, 126));
    let f = logmel(&cycle(vec![0.0; 16000], 4000), &cfg).unwrap();
    assert_eq!(f.values.dim(), (128, 126));
    let first = f.values[[0, 0]];
    assert!((first - LOG_FLOOR.ln()).abs() < 1e-6);
    assert!(f.values.iter().all(|v| *v == first));
    assert!(logmel(&cycle(vec![0.0; 15999], 4000), &cfg).is_err());
}

#[test]
fn slaney_mel_scale() {
    assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    assert!((hz_to_mel(500.0) - 7.5).abs() < 1e-12);
    assert!((hz_to_mel(6400.0) - 42.0).abs() < 1e-9);
}

#[test]
fn tone_lands_in_its_mel_bin() {
    let cfg = DspConfig::default();
    let f = logmel(&cycle(tone(500.0, 4000.0, 16000, 0.5), 4000), &cfg).unwrap();
    let energy: Vec<f64> = f.values.rows().into_iter().map(|r| r.sum()).collect();
    let argmax = (0..128).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
    // Filter centres from the mel scale, computed independently: linear region, 1000/15 Hz per mel.
    let top = 15.0 + (2.0f64).ln() / (6.4f64.ln() / 27.0);
    let centres: Vec<f64> = (1..=128)
        .map(|i| {
            let m = top * i as f64 / 129.0;
            if m < 15.0 { m * 200.0 / 3.0 } else { 1000.0 * ((m - 15.0) * 6.4f64.ln() / 27.0).exp() }
        })
        .collect();
    let nearest = (0..128).min_by(|&a, &b| (centres[a] - 500.0).abs().total_cmp(&(centres[b] - 500.0).abs())).unwrap();
    assert_eq!(argmax, nearest);
}

#[test]
fn filterbank_triangles_peak_at_one() {
    let fx = FeatureExtractor::new(&DspConfig::default()).unwrap();
    let bank = fx.filterbank();
    assert_eq!(bank.filters.len(), 128);
    for (k0, w) in &bank.filters {
        assert!(!w.is_empty());
        assert!(w.iter().all(|v| *v > 0.0 && *v <= 1.0));
        assert!(k0 + w.len() <= 129);
    }
}

#[test]
fn pipeline_is_deterministic() {
    let x: Vec<f64> = (0..30000).map(|i| ((i as f64) * 0.013).sin() * 0.3).collect();
    let c = cycle(x, 8000);
    let fx = FeatureExtractor::new(&DspConfig::default()).unwrap();
    assert_eq!(fx.extract(&c, CropMode::Test, 0).unwrap(), fx.extract(&c, CropMode::Test, 1).unwrap());
    assert_eq!(fx.extract(&c, CropMode::Train, 3).unwrap(), fx.extract(&c, CropMode::Train, 3).unwrap());
}

#[test]
fn feature_cache_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    let cfg = DspConfig::default();
    let cycles: Vec<RespiratoryCycle> = (0..3)
        .map(|k| {
            let mut c = cycle(tone(300.0 + 100.0 * k as f64, 4000.0, 17000, 0.3), 4000);
            c.index = k;
            c
        })
        .collect();
    let feats = extract_all(&cycles, &cfg).unwrap();
    assert!(read_feature_cache(&path, "h", &cfg).unwrap().is_none());
    write_feature_cache(&path, "h", &feats).unwrap();
    assert_eq!(read_feature_cache(&path, "h", &cfg).unwrap().unwrap(), feats);
    assert!(read_feature_cache(&path, "other", &cfg).unwrap().is_none());
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_feature_cache(&path, "h", &cfg), Err(Error::Cache(_))));
}

#[test]
fn config_hash_tracks_every_field() {
    let a = DspConfig::default();
    let b = DspConfig { hop: 64, ..a.clone() };
    assert_eq!(a.hash(), DspConfig::default().hash());
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mel_scale_inverts(f in 0.0f64..20000.0) {
        prop_assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9 * f.max(1.0));
    }

    #[test]
    fn logmel_is_finite(scale in 0.0f64..1e6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..16000).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let f = logmel(&cycle(x, 4000), &DspConfig::default()).unwrap();
        prop_assert!(f.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sub_hop_shift_changes_feature_boundedly(shift in 1usize..128, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..20000).map(|i| 0.3 * (i as f64 * 0.5).sin() + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        let cfg = DspConfig::default();
        let fx = FeatureExtractor::new(&cfg).unwrap();
        let a = fx.extract(&cycle(x.clone(), 4000), CropMode::Test, 0).unwrap();
        let b = fx.extract(&cycle(x[shift..].to_vec(), 4000), CropMode::Test, 0).unwrap();
        prop_assert_eq!(a.values.dim(), b.values.dim());
        let mean_diff = (&a.values - &b.values).mapv(f64::abs).mean().unwrap();
        prop_assert!(mean_diff.is_finite() && mean_diff < 1.0, "mean |Δ| = {}", mean_diff);
    }
}
