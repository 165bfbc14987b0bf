//! Explanation spectrum: attack-survival profiles of real samples, prototype and
//! criticism selection, sensitivity tables and attention projections.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_sign_step, ifgsm_until_failure, AttackConfig, ClipRange, Reference};
use crate::dataset::{CycleRef, RespiratoryCycle};
use crate::dsp::{extract_all, CropMode, DspConfig, FeatureExtractor, LogMelFeature, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::{Class, N_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    /// Per-step magnitude of the survival attack.
    pub epsilon: f64,
    pub i_max: usize,
    /// Single-step magnitudes tried for criticisms; kept sorted ascending.
    pub eps_grid: Vec<f64>,
    pub clip: Option<ClipRange>,
    #[serde(default)]
    pub reference: Reference,
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.i_max == 0 {
            return Err(Error::Config("i_max must be at least 1".into()));
        }
        if self.eps_grid.is_empty() {
            return Err(Error::Config("epsilon grid is empty".into()));
        }
        if self.eps_grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("epsilon grid {:?} has invalid entries", self.eps_grid)));
        }
        if self.eps_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("epsilon grid {:?} must be strictly increasing", self.eps_grid)));
        }
        Ok(())
    }

    fn attack(&self) -> AttackConfig {
        AttackConfig { epsilon: self.epsilon, steps: self.i_max, clip: self.clip, reference: self.reference }
    }

    fn grid_position(&self, epsilon: f64) -> Result<usize> {
        self.eps_grid
            .iter()
            .position(|g| (g - epsilon).abs() <= 1e-12 * g.abs().max(1.0))
            .ok_or_else(|| Error::EpsilonOffGrid { epsilon, grid: self.eps_grid.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessProfile {
    pub cycle: CycleRef,
    pub clean_prediction: usize,
    pub clean_correct: bool,
    /// Steps survived before the first misclassification, capped at `i_max`.
    /// `None` for clean-incorrect samples.
    pub survival_depth: Option<usize>,
    /// Smallest grid ε whose single step misclassifies.
    pub single_step_failure_eps: Option<f64>,
}

/// Profiles of one split together with the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub config: ProfileConfig,
    pub profiles: Vec<RobustnessProfile>,
}

/// Per-class indices into [`ProfileSet::profiles`].
pub type ClassSets = [Vec<usize>; N_CLASSES];

pub fn class_counts(sets: &ClassSets) -> [usize; N_CLASSES] {
    std::array::from_fn(|c| sets[c].len())
}

pub fn profile(state: &ModelState, cycles: &[RespiratoryCycle], dsp: &DspConfig, config: &ProfileConfig) -> Result<ProfileSet> {
    if cycles.is_empty() {
        return Err(Error::Empty("profiling set"));
    }
    profile_features(state, &extract_all(cycles, dsp)?, config)
}

pub fn profile_features(state: &ModelState, feats: &[LogMelFeature], config: &ProfileConfig) -> Result<ProfileSet> {
    config.validate()?;
    if feats.is_empty() {
        return Err(Error::Empty("profiling set"));
    }
    let profiles = feats.par_iter().map(|f| profile_one(state, f, config)).collect::<Result<_>>()?;
    Ok(ProfileSet { config: config.clone(), profiles })
}

fn profile_one(state: &ModelState, f: &LogMelFeature, config: &ProfileConfig) -> Result<RobustnessProfile> {
    let y = f.source.label.index();
    let (pred, grad) = state.gradient_with(&f.values, |p| p.predicted_class())?;
    let clean = pred.predicted_class();
    let mut out = RobustnessProfile {
        cycle: f.source.clone(),
        clean_prediction: clean,
        clean_correct: clean == y,
        survival_depth: None,
        single_step_failure_eps: None,
    };
    if !out.clean_correct {
        return Ok(out);
    }
    let trace = ifgsm_until_failure(state, &f.values, y, &config.attack())?;
    out.survival_depth = Some(trace.first_failure_step.map_or(config.i_max, |s| s - 1));

    // Every grid step starts from the clean feature, so one gradient serves all of them.
    let stepped: Vec<Array2<f64>> = config.eps_grid.iter().map(|&e| apply_sign_step(&f.values, &grad, e, config.clip)).collect();
    let preds = state.predict(&stepped)?;
    out.single_step_failure_eps = config
        .eps_grid
        .iter()
        .zip(&preds)
        .find(|(_, p)| p.predicted_class() != y)
        .map(|(e, _)| *e);
    Ok(out)
}

/// Clean-correct samples that survive at least `steps` steps, per class.
pub fn select_prototypes(set: &ProfileSet, steps: usize) -> Result<ClassSets> {
    if steps > set.config.i_max {
        return Err(Error::Config(format!("I = {steps} exceeds the profiled maximum {}", set.config.i_max)));
    }
    let mut out = ClassSets::default();
    for (i, p) in set.profiles.iter().enumerate() {
        if p.survival_depth.is_some_and(|d| d >= steps) {
            out[p.cycle.label.index()].push(i);
        }
    }
    Ok(out)
}

/// Clean-correct samples flipped by a single step of at most `epsilon`, per class.
pub fn select_criticisms(set: &ProfileSet, epsilon: f64) -> Result<ClassSets> {
    let k = set.config.grid_position(epsilon)?;
    let limit = set.config.eps_grid[k];
    let mut out = ClassSets::default();
    for (i, p) in set.profiles.iter().enumerate() {
        if p.clean_correct && p.single_step_failure_eps.is_some_and(|e| e <= limit) {
            out[p.cycle.label.index()].push(i);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub cycle: CycleRef,
    pub survival_depth: Option<usize>,
    pub single_step_failure_eps: Option<f64>,
}

impl From<&RobustnessProfile> for Member {
    fn from(p: &RobustnessProfile) -> Self {
        Member { cycle: p.cycle.clone(), survival_depth: p.survival_depth, single_step_failure_eps: p.single_step_failure_eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassExplanation {
    pub class: Class,
    pub prototypes: Vec<Member>,
    pub criticisms: Vec<Member>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSettings {
    /// Per-step ε of the survival attack.
    pub epsilon: f64,
    /// Survival depth required of prototypes.
    pub prototype_steps: usize,
    pub i_max: usize,
    /// Single-step ε below which a sample counts as a criticism.
    pub criticism_epsilon: f64,
    pub eps_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSet {
    pub settings: ExplanationSettings,
    pub classes: Vec<ClassExplanation>,
    /// Survivors dropped from the prototypes because they are also criticisms.
    pub removed_overlap: usize,
}

/// Prototypes at `prototype_steps` and criticisms at `criticism_epsilon`.
///
/// A sample can survive `prototype_steps` steps of size `epsilon` and still be
/// flipped by one step of a different grid size. Such samples are kept as
/// criticisms only, so the two sets never share a member.
pub fn explanation_set(set: &ProfileSet, prototype_steps: usize, criticism_epsilon: f64) -> Result<ExplanationSet> {
    let protos = select_prototypes(set, prototype_steps)?;
    let crits = select_criticisms(set, criticism_epsilon)?;
    let mut removed = 0;
    let mut classes = Vec::with_capacity(N_CLASSES);
    for c in Class::ALL {
        let k = c.index();
        let kept: Vec<usize> = protos[k].iter().copied().filter(|i| !crits[k].contains(i)).collect();
        removed += protos[k].len() - kept.len();
        classes.push(ClassExplanation {
            class: c,
            prototypes: kept.iter().map(|&i| Member::from(&set.profiles[i])).collect(),
            criticisms: crits[k].iter().map(|&i| Member::from(&set.profiles[i])).collect(),
        });
    }
    if removed > 0 {
        log::warn!("{removed} samples are both survivors and criticisms; kept as criticisms only");
    }
    Ok(ExplanationSet {
        settings: ExplanationSettings {
            epsilon: set.config.epsilon,
            prototype_steps,
            i_max: set.config.i_max,
            criticism_epsilon,
            eps_grid: set.config.eps_grid.clone(),
        },
        classes,
        removed_overlap: removed,
    })
}

/// Prototype and criticism counts per class over ranges of I and ε.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub i_values: Vec<usize>,
    pub prototype_counts: Vec<[usize; N_CLASSES]>,
    pub eps_values: Vec<f64>,
    pub criticism_counts: Vec<[usize; N_CLASSES]>,
}

pub fn sensitivity_report(set: &ProfileSet, i_values: &[usize], eps_values: &[f64]) -> Result<SensitivityReport> {
    let prototype_counts = i_values.iter().map(|&i| select_prototypes(set, i).map(|s| class_counts(&s))).collect::<Result<_>>()?;
    let criticism_counts = eps_values.iter().map(|&e| select_criticisms(set, e).map(|s| class_counts(&s))).collect::<Result<_>>()?;
    Ok(SensitivityReport { i_values: i_values.to_vec(), prototype_counts, eps_values: eps_values.to_vec(), criticism_counts })
}

fn counts_csv<T: std::fmt::Display>(key: &str, xs: &[T], counts: &[[usize; N_CLASSES]]) -> String {
    let mut s = key.to_string();
    for c in Class::ALL {
        s += &format!(",{}", c.name());
    }
    s.push('\n');
    for (x, row) in xs.iter().zip(counts) {
        s += &format!("{x},{},{},{},{}\n", row[0], row[1], row[2], row[3]);
    }
    s
}

impl SensitivityReport {
    pub fn prototype_csv(&self) -> String {
        counts_csv("steps", &self.i_values, &self.prototype_counts)
    }

    pub fn criticism_csv(&self) -> String {
        counts_csv("epsilon", &self.eps_values, &self.criticism_counts)
    }

    /// Both count tables as markdown.
    pub fn markdown(&self) -> String {
        let table = |key: &str, xs: Vec<String>, counts: &[[usize; N_CLASSES]]| {
            let mut s = format!("| {key} | Normal | Crackle | Wheeze | Both |\n|---|---|---|---|---|\n");
            for (x, r) in xs.iter().zip(counts) {
                s += &format!("| {x} | {} | {} | {} | {} |\n", r[0], r[1], r[2], r[3]);
            }
            s
        };
        format!(
            "Prototypes\n\n{}\nCriticisms\n\n{}",
            table("I", self.i_values.iter().map(|v| v.to_string()).collect(), &self.prototype_counts),
            table("epsilon", self.eps_values.iter().map(|v| v.to_string()).collect(), &self.criticism_counts),
        )
    }
}

/// How the upsampled attention map is thresholded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    #[default]
    Median,
    /// `(min + max) / 2`.
    Midpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjection {
    pub predicted_class: usize,
    /// Attention of the predicted class upsampled to the feature shape.
    pub attention: Array2<f64>,
    pub threshold: f64,
    pub mask: Array2<bool>,
    /// Feature inside the mask, `ln(LOG_FLOOR)` outside.
    pub masked: Array2<f64>,
}

pub fn attention_projection(state: &ModelState, cycle: &RespiratoryCycle, dsp: &DspConfig, rule: Threshold) -> Result<AttentionProjection> {
    let f = FeatureExtractor::new(dsp)?.extract(cycle, CropMode::Test, 0)?;
    project_feature(state, &f.values, rule)
}

pub fn project_feature(state: &ModelState, feature: &Array2<f64>, rule: Threshold) -> Result<AttentionProjection> {
    let pred = state.predict(std::slice::from_ref(feature))?.pop().expect("one prediction");
    let maps = pred.attention_map.as_ref().ok_or(Error::NoAttention)?;
    let class = pred.predicted_class();
    let (h, w) = feature.dim();
    let attention = upsample_nearest(&maps.index_axis(ndarray::Axis(0), class).to_owned(), h, w);
    let threshold = match rule {
        Threshold::Median => median(attention.iter().copied().collect()),
        Threshold::Midpoint => {
            let (lo, hi) = attention.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
            (lo + hi) / 2.0
        }
    };
    let mask = attention.mapv(|v| v > threshold);
    let floor = LOG_FLOOR.ln();
    let masked = ndarray::Zip::from(feature).and(&mask).map_collect(|&v, &m| if m { v } else { floor });
    Ok(AttentionProjection { predicted_class: class, attention, threshold, mask, masked })
}

/// Nearest-neighbour resize: output `(r, c)` reads input `(r·h/H, c·w/W)` rounded down.
pub fn upsample_nearest(map: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| map[[r * h / rows, c * w / cols]])
}

/// Mean of the two middle values for even counts.
fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
