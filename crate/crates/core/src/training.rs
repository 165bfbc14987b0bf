//! Adam training with a step-decayed learning rate and devel-UAR model selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::RespiratoryCycle;
use crate::dsp::{extract_all, CropMode, DspConfig, FeatureExtractor, LogMelFeature};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, stack, Mode, ModelState};
use crate::Class;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    /// Iterations between learning-rate decays.
    pub decay_every: usize,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Iterations between devel evaluations.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr0: 0.001, decay: 0.9, decay_every: 200, batch_size: 16, max_iterations: 10_000, seed: 0, eval_every: 200 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("need lr0 > 0 and decay in (0, 1]".into()));
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("decay_every, batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }

    /// `lr0 · decay^floor(t / decay_every)`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr0 * self.decay.powi((iteration / self.decay_every) as i32)
    }
}

/// One row per devel evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// Completed iterations at evaluation time.
    pub iteration: usize,
    /// Learning rate of the last update.
    pub lr: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    /// `NaN` when the devel set is empty.
    pub devel_uar: f64,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("iteration,lr,train_loss,devel_uar\n");
    for r in history {
        s += &format!("{},{},{},{}\n", r.iteration, r.lr, r.train_loss, r.devel_uar);
    }
    s
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(state: &ModelState) -> Self {
        let zeros = || state.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, state: &mut ModelState, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in state.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// One optimisation step on a batch of features; returns the batch loss before the update.
fn update(state: &mut ModelState, adam: &mut Adam, feats: &[ndarray::Array2<f64>], labels: &[usize], lr: f64) -> Result<f64> {
    let tape = state.forward_tape(&stack(feats)?, Mode::Train)?;
    let preds = tape.predictions();
    let loss = model::loss(&preds, labels)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let b = labels.len() as f64;
    let d_logits: Vec<f64> = preds
        .iter()
        .zip(labels)
        .flat_map(|(p, &y)| p.probabilities.iter().enumerate().map(move |(k, q)| (q - if k == y { 1.0 } else { 0.0 }) / b))
        .collect();
    let grads = state.backward(&tape, &d_logits, false);
    state.update_running_stats(&tape);
    adam.step(state, &grads.params, lr);
    Ok(loss)
}

/// Trains from `state` and returns the evaluated state with the highest devel
/// UAR (earliest on ties) together with the evaluation history. When no
/// evaluation takes place the final state is returned.
pub fn train(
    state: ModelState,
    train_cycles: &[RespiratoryCycle],
    devel_cycles: &[RespiratoryCycle],
    dsp: &DspConfig,
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<HistoryRow>)> {
    cfg.validate()?;
    if train_cycles.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.max_iterations == 0 {
        return Ok((state, Vec::new()));
    }
    let fx = FeatureExtractor::new(dsp)?;
    let prepared: Vec<RespiratoryCycle> = train_cycles.par_iter().map(|c| fx.preprocess(c)).collect::<Result<_>>()?;
    let devel = extract_all(devel_cycles, dsp)?;
    if devel.is_empty() {
        log::warn!("devel set is empty; the final state is returned");
    }

    let mut state = state;
    let mut adam = Adam::new(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, ModelState)> = None;
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;

    for t in 0..cfg.max_iterations {
        let lr = cfg.lr_at(t);
        let picks: Vec<(usize, u64)> = (0..cfg.batch_size).map(|_| (rng.gen_range(0..prepared.len()), rng.gen())).collect();
        let feats: Vec<ndarray::Array2<f64>> = picks
            .par_iter()
            .map(|&(i, seed)| fx.from_preprocessed(&prepared[i], CropMode::Train, seed).map(|f| f.values))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = picks.iter().map(|&(i, _)| prepared[i].label.index()).collect();
        let loss = update(&mut state, &mut adam, &feats, &labels, lr)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t, lr, loss });
        }
        loss_sum += loss;
        loss_n += 1;

        if (t + 1) % cfg.eval_every == 0 {
            let devel_uar = if devel.is_empty() { f64::NAN } else { evaluate_features(&state, &devel)?.uar };
            log::info!("iteration {} lr {lr:.3e} loss {:.4} devel UAR {devel_uar:.4}", t + 1, loss_sum / loss_n as f64);
            history.push(HistoryRow { iteration: t + 1, lr, train_loss: loss_sum / loss_n as f64, devel_uar });
            loss_sum = 0.0;
            loss_n = 0;
            if best.as_ref().is_none_or(|(b, _)| devel_uar > *b) {
                best = Some((devel_uar, state.clone()));
            }
        }
    }
    let chosen = match best {
        Some((uar, s)) if uar.is_finite() => s,
        _ => state,
    };
    Ok((chosen, history))
}

/// Metrics of the argmax predictions on test-mode features.
pub fn evaluate(state: &ModelState, cycles: &[RespiratoryCycle], dsp: &DspConfig) -> Result<MetricsReport> {
    if cycles.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    evaluate_features(state, &extract_all(cycles, dsp)?)
}

pub fn evaluate_features(state: &ModelState, feats: &[LogMelFeature]) -> Result<MetricsReport> {
    let predicted = predict_classes(state, feats)?;
    let truth: Vec<Class> = feats.iter().map(|f| f.source.label).collect();
    metrics::compute(&truth, &predicted)
}

pub fn predict_classes(state: &ModelState, feats: &[LogMelFeature]) -> Result<Vec<Class>> {
    let values: Vec<ndarray::Array2<f64>> = feats.iter().map(|f| f.values.clone()).collect();
    Ok(state
        .predict(&values)?
        .iter()
        .map(|p| Class::from_index(p.predicted_class()).expect("four logits"))
        .collect())
}
