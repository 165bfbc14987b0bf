use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{build, loss, Encoder, HeadKind, ModelSpec};
use crate::Class;

fn tiny(head: HeadKind, seed: u64) -> ModelState {
    let mut spec = ModelSpec::new(Encoder::Cnn8, false, head).with_base_channels(2);
    spec.input_shape = (32, 30);
    build(&spec, seed).unwrap()
}

fn feature(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((32, 30), |_| rng.gen_range(-3.0..1.0))
}

fn cfg(epsilon: f64, steps: usize) -> AttackConfig {
    AttackConfig { epsilon, steps, clip: None, reference: Reference::Predicted }
}

fn as_feature(values: Array2<f64>, label: Class, i: usize) -> LogMelFeature {
    LogMelFeature {
        values,
        config: DspConfig::default(),
        source: CycleRef {
            id: format!("r#{i}"),
            recording_id: "r".into(),
            index: i,
            patient_id: "1".into(),
            label,
            t_begin: 0.0,
            t_end: 1.0,
        },
    }
}

#[test]
fn zero_epsilon_is_identity() {
    let s = tiny(HeadKind::Attention, 1);
    let x = feature(2);
    assert_eq!(fgsm_step(&s, &x, 0, 0.0, None).unwrap(), x);
    let clip = ClipRange { min: -10.0, max: 10.0 };
    assert_eq!(fgsm_step(&s, &x, 3, 0.0, Some(clip)).unwrap(), x);
}

#[test]
fn entries_move_by_exactly_epsilon() {
    for head in [HeadKind::Attention, HeadKind::MaxpoolFc] {
        let s = tiny(head, 3);
        let x = feature(4);
        let eps = 0.37;
        let g = s.input_gradient(&x, 1).unwrap();
        let y = fgsm_step(&s, &x, 1, eps, None).unwrap();
        let mut moved = 0;
        for ((xv, gv), yv) in x.iter().zip(&g).zip(&y) {
            if *gv == 0.0 {
                assert_eq!(yv, xv);
            } else {
                assert_eq!(*yv, xv + eps * gv.signum());
                moved += 1;
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn clipping_bounds_the_step() {
    let s = tiny(HeadKind::Attention, 3);
    let x = feature(5);
    let clip = ClipRange { min: -2.5, max: 0.5 };
    let g = s.input_gradient(&x, 2).unwrap();
    let y = fgsm_step(&s, &x, 2, 0.6, Some(clip)).unwrap();
    for ((xv, gv), yv) in x.iter().zip(&g).zip(&y) {
        let free = xv + 0.6 * if *gv == 0.0 { 0.0 } else { gv.signum() };
        assert_eq!(*yv, free.clamp(-2.5, 0.5));
    }
}

#[test]
fn zero_gradient_model_leaves_input() {
    let mut s = tiny(HeadKind::MaxpoolFc, 1);
    s.param_mut("head.fc.weight").unwrap().data.fill(0.0);
    let x = feature(6);
    assert_eq!(fgsm_step(&s, &x, 0, 0.5, None).unwrap(), x);
}

#[test]
fn single_step_trace_matches_fgsm() {
    let s = tiny(HeadKind::Attention, 7);
    let x = feature(8);
    let clean = predict_one(&s, &x).unwrap();
    let t = ifgsm(&s, &x, clean, &cfg(0.3, 1)).unwrap();
    let step = fgsm_step(&s, &x, clean, 0.3, None).unwrap();
    assert_eq!(t.original_prediction, clean);
    assert_eq!(t.features, vec![step.clone()]);
    assert_eq!(t.predictions, vec![predict_one(&s, &step).unwrap()]);
}

#[test]
fn zero_epsilon_never_fails_a_correct_sample() {
    let s = tiny(HeadKind::Attention, 9);
    let x = feature(10);
    let clean = predict_one(&s, &x).unwrap();
    let t = ifgsm(&s, &x, clean, &cfg(0.0, 4)).unwrap();
    assert_eq!(t.predictions, vec![clean; 4]);
    assert_eq!(t.first_failure_step, None);
}

#[test]
fn traces_extend_as_prefixes_and_stay_in_budget() {
    let s = tiny(HeadKind::Attention, 11);
    let x = feature(12);
    let eps = 0.2;
    let long = ifgsm(&s, &x, 0, &cfg(eps, 6)).unwrap();
    for k in 1..6 {
        let short = ifgsm(&s, &x, 0, &cfg(eps, k)).unwrap();
        assert_eq!(short.features[..], long.features[..k]);
        assert_eq!(short.predictions[..], long.predictions[..k]);
    }
    for (k, f) in long.features.iter().enumerate() {
        let dist = (f - &x).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(dist <= (k + 1) as f64 * eps + 1e-12);
    }
    let first = long.predictions.iter().position(|&p| p != 0).map(|i| i + 1);
    assert_eq!(long.first_failure_step, first);
    let early = ifgsm_until_failure(&s, &x, 0, &cfg(eps, 6)).unwrap();
    assert_eq!(early.first_failure_step, first);
    assert_eq!(early.predictions[..], long.predictions[..early.predictions.len()]);
}

#[test]
fn fixed_true_label_mode_uses_the_label() {
    let s = tiny(HeadKind::Attention, 13);
    let x = feature(14);
    let clean = predict_one(&s, &x).unwrap();
    let other = (clean + 1) % 4;
    let c = AttackConfig { reference: Reference::True, ..cfg(0.25, 1) };
    let t = ifgsm(&s, &x, other, &c).unwrap();
    assert_eq!(t.features[0], fgsm_step(&s, &x, other, 0.25, None).unwrap());
}

#[test]
fn small_step_does_not_decrease_reference_loss() {
    let s = tiny(HeadKind::Attention, 15);
    for seed in 0..4 {
        let x = feature(100 + seed);
        let y = predict_one(&s, &x).unwrap();
        let before = loss(&s.predict(std::slice::from_ref(&x)).unwrap(), &[y]).unwrap();
        let x1 = fgsm_step(&s, &x, y, 1e-4, None).unwrap();
        let after = loss(&s.predict(std::slice::from_ref(&x1)).unwrap(), &[y]).unwrap();
        assert!(after >= before - 1e-12, "{before} -> {after}");
    }
}

#[test]
fn success_rate_is_nested_in_steps() {
    let s = tiny(HeadKind::Attention, 17);
    let feats: Vec<LogMelFeature> = (0..8)
        .map(|i| {
            let x = feature(200 + i);
            let p = predict_one(&s, &x).unwrap();
            as_feature(x, Class::ALL[p], i as usize)
        })
        .collect();
    let rate = |e: f64, k: usize| success_rate(&attack_features(&s, &feats, &cfg(e, k)).unwrap());
    assert_eq!(rate(0.0, 5), 0.0);
    for e in [0.05, 0.2, 0.5] {
        assert!(rate(e, 5) >= rate(e, 1));
    }
}

#[test]
fn config_is_validated() {
    assert!(cfg(-0.1, 1).validate().is_err());
    assert!(cfg(0.1, 0).validate().is_err());
    let c = AttackConfig { clip: Some(ClipRange { min: 1.0, max: 1.0 }), ..cfg(0.1, 1) };
    assert!(c.validate().is_err());
}

#[test]
fn traces_serialize_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    let s = tiny(HeadKind::Attention, 19);
    let feats = vec![as_feature(feature(1), Class::Wheeze, 0), as_feature(feature(2), Class::Normal, 1)];
    let recs = attack_features(&s, &feats, &cfg(0.3, 3)).unwrap();
    write_traces_jsonl(&p, &recs).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let back: Vec<TraceRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, recs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn steps_stay_finite_and_clipped(model_seed in 0u64..1000, x_seed in any::<u64>(), eps in 0.0f64..2.0) {
        let s = tiny(HeadKind::Attention, model_seed);
        let x = feature(x_seed);
        let clip = ClipRange { min: -3.0, max: 1.0 };
        let y = fgsm_step(&s, &x, (x_seed % 4) as usize, eps, Some(clip)).unwrap();
        prop_assert!(y.iter().all(|v| v.is_finite() && *v >= -3.0 && *v <= 1.0));
    }
}
