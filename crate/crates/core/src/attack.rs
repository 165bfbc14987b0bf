//! Gradient-sign attacks on log-Mel features against a frozen model.

use std::path::Path;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CycleRef, RespiratoryCycle};
use crate::dsp::{extract_all, DspConfig, LogMelFeature};
use crate::error::{Error, Result};
use crate::model::{ModelState, Prediction};

/// Closed interval that perturbed features are clipped to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub min: f64,
    pub max: f64,
}

impl ClipRange {
    /// Global minimum and maximum over a feature set.
    pub fn of_features(feats: &[LogMelFeature]) -> Result<Self> {
        let mut it = feats.iter().flat_map(|f| f.values.iter().copied());
        let first = it.next().ok_or(Error::Empty("features for clip range"))?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Ok(ClipRange { min, max })
    }
}

/// Label whose loss each step increases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The model's current prediction, re-evaluated before every step.
    #[default]
    Predicted,
    /// The annotated label throughout.
    True,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Per-step magnitude in log-Mel units.
    pub epsilon: f64,
    pub steps: usize,
    /// `None` disables clipping.
    pub clip: Option<ClipRange>,
    #[serde(default)]
    pub reference: Reference,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if let Some(c) = self.clip {
            if !(c.min < c.max) {
                return Err(Error::Config(format!("clip range {}..{} is empty", c.min, c.max)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackTrace {
    pub original_prediction: usize,
    /// Feature after each step.
    pub features: Vec<Array2<f64>>,
    /// Predicted class after each step.
    pub predictions: Vec<usize>,
    /// 1-based index of the first step whose prediction differs from the true label.
    pub first_failure_step: Option<usize>,
}

/// `clip(x + ε · sign(g))` with `sign(0) = 0`.
pub fn apply_sign_step(x: &Array2<f64>, grad: &Array2<f64>, epsilon: f64, clip: Option<ClipRange>) -> Array2<f64> {
    let mut out = x.clone();
    Zip::from(&mut out).and(grad).for_each(|v, &g| {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        *v += epsilon * s;
        if let Some(c) = clip {
            *v = v.clamp(c.min, c.max);
        }
    });
    out
}

/// One gradient-sign step that increases the loss at `reference_label`.
pub fn fgsm_step(
    state: &ModelState,
    feature: &Array2<f64>,
    reference_label: usize,
    epsilon: f64,
    clip: Option<ClipRange>,
) -> Result<Array2<f64>> {
    let grad = state.input_gradient(feature, reference_label)?;
    Ok(apply_sign_step(feature, &grad, epsilon, clip))
}

/// Shared step loop. Stops after the first failure when `stop_on_failure` is set.
fn run(
    state: &ModelState,
    feature: &Array2<f64>,
    true_label: usize,
    config: &AttackConfig,
    keep_features: bool,
    stop_on_failure: bool,
) -> Result<AttackTrace> {
    config.validate()?;
    let mut x = feature.clone();
    let mut original = None;
    let mut features = Vec::new();
    let mut predictions = Vec::with_capacity(config.steps);
    let mut first_failure = None;
    for step in 1..=config.steps {
        let (pred, grad) = state.gradient_with(&x, |p: &Prediction| match config.reference {
            Reference::Predicted => p.predicted_class(),
            Reference::True => true_label,
        })?;
        if step == 1 {
            original = Some(pred.predicted_class());
        } else {
            record(&mut predictions, &mut first_failure, pred.predicted_class(), true_label);
            if stop_on_failure && first_failure.is_some() {
                break;
            }
        }
        x = apply_sign_step(&x, &grad, config.epsilon, config.clip);
        if keep_features {
            features.push(x.clone());
        }
    }
    if predictions.len() < config.steps && !(stop_on_failure && first_failure.is_some()) {
        let last = predict_one(state, &x)?;
        record(&mut predictions, &mut first_failure, last, true_label);
    }
    Ok(AttackTrace {
        original_prediction: original.expect("at least one step"),
        features,
        predictions,
        first_failure_step: first_failure,
    })
}

fn record(predictions: &mut Vec<usize>, first_failure: &mut Option<usize>, class: usize, true_label: usize) {
    predictions.push(class);
    if first_failure.is_none() && class != true_label {
        *first_failure = Some(predictions.len());
    }
}

pub(crate) fn predict_one(state: &ModelState, x: &Array2<f64>) -> Result<usize> {
    Ok(state.predict(std::slice::from_ref(x))?[0].predicted_class())
}

/// Iterative attack from the clean feature, recording every step.
pub fn ifgsm(state: &ModelState, feature: &Array2<f64>, true_label: usize, config: &AttackConfig) -> Result<AttackTrace> {
    run(state, feature, true_label, config, true, false)
}

/// Like [`ifgsm`] without stored features, stopping at the first failure.
pub(crate) fn ifgsm_until_failure(
    state: &ModelState,
    feature: &Array2<f64>,
    true_label: usize,
    config: &AttackConfig,
) -> Result<AttackTrace> {
    run(state, feature, true_label, config, false, true)
}

/// Per-sample attack outcome for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: CycleRef,
    pub true_label: usize,
    pub original_prediction: usize,
    pub predictions: Vec<usize>,
    pub first_failure_step: Option<usize>,
}

/// Attacks every feature in parallel; results keep input order.
pub fn attack_features(state: &ModelState, feats: &[LogMelFeature], config: &AttackConfig) -> Result<Vec<TraceRecord>> {
    config.validate()?;
    feats
        .par_iter()
        .map(|f| {
            let y = f.source.label.index();
            let t = run(state, &f.values, y, config, false, false)?;
            Ok(TraceRecord {
                cycle: f.source.clone(),
                true_label: y,
                original_prediction: t.original_prediction,
                predictions: t.predictions,
                first_failure_step: t.first_failure_step,
            })
        })
        .collect()
}

/// Fraction of clean-correct samples fooled within `config.steps` steps; 0 when
/// no sample is classified correctly.
pub fn success_rate(records: &[TraceRecord]) -> f64 {
    let correct: Vec<&TraceRecord> = records.iter().filter(|r| r.original_prediction == r.true_label).collect();
    if correct.is_empty() {
        log::warn!("no clean-correct samples; attack success rate is 0");
        return 0.0;
    }
    correct.iter().filter(|r| r.first_failure_step.is_some()).count() as f64 / correct.len() as f64
}

pub fn attack_success_rate(state: &ModelState, cycles: &[RespiratoryCycle], dsp: &DspConfig, config: &AttackConfig) -> Result<f64> {
    if cycles.is_empty() {
        return Err(Error::Empty("attack set"));
    }
    Ok(success_rate(&attack_features(state, &extract_all(cycles, dsp)?, config)?))
}

/// One JSON object per line.
pub fn write_traces_jsonl(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out += &serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests;
