use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use respex::attack::{AttackConfig, ClipRange, Reference};
use respex::dataset::{Subset, SyntheticSpec};
use respex::dsp::DspConfig;
use respex::model::{Encoder, HeadKind, ModelSpec};
use respex::spectrum::{ProfileConfig, Threshold};
use respex::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything one experiment needs. The single `seed` drives corpus
/// generation, the devel split, weight initialisation and batch sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub dsp: DspConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub explain: ExplainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n_per_class: usize,
        duration: f64,
        sample_rate: u32,
    },
    Icbhi {
        audio_dir: PathBuf,
        annotation_dir: PathBuf,
        /// Official train/test listing, one `recording subset` pair per line.
        split_listing: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: Encoder,
    pub dilated: bool,
    pub head: HeadKind,
    /// Channels of the first block; later blocks double it.
    pub base_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { encoder: Encoder::Resnet, dilated: true, head: HeadKind::Attention, base_channels: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr0: t.lr0,
            decay: t.decay,
            decay_every: t.decay_every,
            batch_size: t.batch_size,
            max_iterations: t.max_iterations,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipName {
    /// Global min/max of the train-split features.
    Train,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClipSetting {
    Named(ClipName),
    Range(ClipRange),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub steps: usize,
    pub clip: ClipSetting,
    pub reference: Reference,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection { epsilon: 0.5, steps: 5, clip: ClipSetting::Named(ClipName::Train), reference: Reference::Predicted }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub split: Subset,
    /// Per-step ε of the survival attack.
    pub epsilon: f64,
    pub i_max: usize,
    pub eps_grid: Vec<f64>,
    /// Survival depth required of reported prototypes.
    pub prototype_steps: usize,
    /// Defaults to `epsilon`, which must then lie on the grid.
    pub criticism_epsilon: Option<f64>,
    /// Exemplar figures per class.
    pub exemplars: usize,
    pub threshold: Threshold,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            split: Subset::Devel,
            epsilon: 0.001,
            i_max: 10,
            eps_grid: vec![0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1],
            prototype_steps: 5,
            criticism_epsilon: None,
            exemplars: 3,
            threshold: Threshold::Median,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale synthetic experiment.
    pub fn synthetic(out: impl Into<PathBuf>) -> Self {
        let s = SyntheticSpec::default();
        ExperimentConfig {
            seed: s.seed,
            out: out.into(),
            data: DataSource::Synthetic { n_per_class: s.n_per_class, duration: s.duration, sample_rate: s.sample_rate },
            dsp: DspConfig::default(),
            model: ModelSection { encoder: Encoder::Cnn8, dilated: false, head: HeadKind::Attention, base_channels: 4 },
            train: TrainSection { max_iterations: 2000, ..Default::default() },
            attack: AttackSection::default(),
            explain: ExplainSection::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Icbhi { audio_dir, annotation_dir, split_listing } = &self.data {
            for p in [audio_dir, annotation_dir, split_listing] {
                if !p.exists() {
                    bail!("configured path {} does not exist", p.display());
                }
            }
        }
        if let DataSource::Synthetic { .. } = &self.data {
            self.synthetic_spec().expect("synthetic source").validate()?;
        }
        self.dsp.validate()?;
        self.model_spec().validate()?;
        self.train_config().validate()?;
        let a = &self.attack;
        AttackConfig { epsilon: a.epsilon, steps: a.steps, clip: None, reference: a.reference }.validate()?;
        self.profile_config(None).validate()?;
        let e = &self.explain;
        if e.prototype_steps > e.i_max {
            bail!("prototype_steps {} exceeds i_max {}", e.prototype_steps, e.i_max);
        }
        let crit = self.criticism_epsilon();
        if !e.eps_grid.iter().any(|g| (g - crit).abs() <= 1e-12 * g.abs().max(1.0)) {
            bail!("criticism epsilon {crit} is not on the grid {:?}", e.eps_grid);
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self.data {
            DataSource::Synthetic { n_per_class, duration, sample_rate } => {
                Some(SyntheticSpec { n_per_class, duration, sample_rate, seed: self.seed })
            }
            DataSource::Icbhi { .. } => None,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        let mut spec = ModelSpec::new(m.encoder, m.dilated, m.head).with_base_channels(m.base_channels);
        spec.input_shape = self.dsp.feature_shape();
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr0: t.lr0,
            decay: t.decay,
            decay_every: t.decay_every,
            batch_size: t.batch_size,
            max_iterations: t.max_iterations,
            seed: self.seed,
            eval_every: t.eval_every,
        }
    }

    pub fn attack_config(&self, clip: Option<ClipRange>) -> AttackConfig {
        let a = &self.attack;
        AttackConfig { epsilon: a.epsilon, steps: a.steps, clip, reference: a.reference }
    }

    pub fn profile_config(&self, clip: Option<ClipRange>) -> ProfileConfig {
        let e = &self.explain;
        ProfileConfig { epsilon: e.epsilon, i_max: e.i_max, eps_grid: e.eps_grid.clone(), clip, reference: self.attack.reference }
    }

    pub fn criticism_epsilon(&self) -> f64 {
        self.explain.criticism_epsilon.unwrap_or(self.explain.epsilon)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
