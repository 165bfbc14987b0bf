//! Config-driven experiments: prepare, train, evaluate, attack, explain, ablation.
//!
//! Every command reads one [`ExperimentConfig`] and writes its artifacts under
//! the configured output directory, recording them in `manifest.json`.

pub mod config;
pub mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use respex::attack::{attack_features, success_rate, write_traces_jsonl, ClipRange, TraceRecord};
use respex::dataset::{
    generate_synthetic, ingest_icbhi, read_split_listing, split_official, synthetic_listing, DatasetSplit, Subset,
};
use respex::dsp::{extract_all, read_feature_cache, write_feature_cache, LogMelFeature, LOG_FLOOR};
use respex::io::write_atomic;
use respex::metrics::{format_table, MetricsReport, TableRow, TableStyle};
use respex::model::{build, load_checkpoint, save_checkpoint, HeadKind, ModelSpec, ModelState};
use respex::spectrum::{
    explanation_set, profile_features, project_feature, sensitivity_report, ExplanationSet, ProfileSet, SensitivityReport,
};
use respex::training::{evaluate_features, history_csv, train, HistoryRow};
use respex::Class;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ClipName, ClipSetting, DataSource, ExperimentConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Listing of every artifact under the output directory with its SHA-256.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Relative path to content hash.
    pub artifacts: BTreeMap<String, String>,
}

/// One configured experiment and its output directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    written: Vec<PathBuf>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Experiment { config, written: Vec::new() })
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.config.out.join(rel)
    }

    pub fn default_checkpoint(&self) -> PathBuf {
        self.path(CHECKPOINT_FILE)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        write_atomic(&p, bytes)?;
        self.written.push(p.clone());
        Ok(p)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Adds this command's artifacts to the manifest.
    pub fn finish(&mut self) -> Result<Manifest> {
        let path = self.path(MANIFEST_FILE);
        let mut m: Manifest = match std::fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t).with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => Manifest::default(),
        };
        let hash = self.config.hash();
        if m.config_hash != hash {
            m.artifacts.clear();
            m.config_hash = hash;
        }
        for p in self.written.drain(..) {
            let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            let rel = p.strip_prefix(&self.config.out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            m.artifacts.insert(rel, config::hex(&Sha256::digest(&bytes)));
        }
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(m)
    }

    /// Loads or synthesizes the corpus and splits it by patient.
    pub fn dataset(&self) -> Result<DatasetSplit> {
        let c = &self.config;
        let (cycles, listing) = match &c.data {
            DataSource::Synthetic { .. } => {
                let spec = c.synthetic_spec().expect("synthetic source");
                (generate_synthetic(&spec)?, synthetic_listing(&spec))
            }
            DataSource::Icbhi { audio_dir, annotation_dir, split_listing } => {
                (ingest_icbhi(audio_dir, annotation_dir)?, read_split_listing(split_listing)?)
            }
        };
        Ok(split_official(&cycles, &listing, c.seed)?)
    }

    fn cache_key(&self, subset: Subset) -> String {
        let c = &self.config;
        let key = serde_json::json!({ "dsp": c.dsp, "data": c.data, "seed": c.seed, "subset": subset });
        config::hex(&Sha256::digest(key.to_string().as_bytes()))
    }

    /// Test-mode features of one split, served from the cache when its key matches.
    /// The flag is true on a cache hit.
    pub fn features(&mut self, split: &DatasetSplit, subset: Subset) -> Result<(Vec<LogMelFeature>, bool)> {
        let rel = format!("cache/{subset}.features");
        let path = self.path(&rel);
        let key = self.cache_key(subset);
        if let Some(f) = read_feature_cache(&path, &key, &self.config.dsp)? {
            log::info!("feature cache hit: {}", path.display());
            return Ok((f, true));
        }
        let cycles = split.get(subset);
        let feats = if cycles.is_empty() { Vec::new() } else { extract_all(cycles, &self.config.dsp)? };
        write_feature_cache(&path, &key, &feats)?;
        self.written.push(path.clone());
        log::info!("feature cache written: {} ({} features)", path.display(), feats.len());
        Ok((feats, false))
    }

    fn clip(&mut self, split: &DatasetSplit) -> Result<Option<ClipRange>> {
        Ok(match self.config.attack.clip {
            ClipSetting::Named(ClipName::None) => None,
            ClipSetting::Range(r) => Some(r),
            ClipSetting::Named(ClipName::Train) => Some(ClipRange::of_features(&self.features(split, Subset::Train)?.0)?),
        })
    }

    fn load_model(&self, checkpoint: Option<&Path>) -> Result<ModelState> {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| self.default_checkpoint());
        let state = load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if state.spec.input_shape != self.config.dsp.feature_shape() {
            anyhow::bail!(
                "checkpoint expects {:?} features but the dsp config gives {:?}",
                state.spec.input_shape,
                self.config.dsp.feature_shape()
            );
        }
        Ok(state)
    }
}

#[derive(Clone, Debug)]
pub struct PrepareOutcome {
    pub summary: String,
    pub cache_hits: [bool; 3],
}

pub fn cmd_prepare(exp: &mut Experiment) -> Result<PrepareOutcome> {
    let split = exp.dataset()?;
    let summary = split.summary_table();
    let mut cache_hits = [false; 3];
    for (k, s) in Subset::ALL.into_iter().enumerate() {
        cache_hits[k] = exp.features(&split, s)?.1;
    }
    let ids: BTreeMap<&str, Vec<String>> =
        Subset::ALL.iter().map(|&s| (s.name(), split.get(s).iter().map(|c| c.id()).collect())).collect();
    exp.write("dataset_summary.md", summary.as_bytes())?;
    exp.write_json("split.json", &ids)?;
    exp.finish()?;
    Ok(PrepareOutcome { summary, cache_hits })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<HistoryRow>,
    pub devel: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
    pub seconds: f64,
}

fn report_or_none(state: &ModelState, feats: &[LogMelFeature]) -> Result<Option<MetricsReport>> {
    if feats.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate_features(state, feats)?))
}

fn train_variant(exp: &mut Experiment, split: &DatasetSplit, spec: &ModelSpec, dir: &str) -> Result<TrainOutcome> {
    let t0 = Instant::now();
    let c = &exp.config;
    let init = build(spec, c.seed)?;
    log::info!("training {} ({} parameters) for {} iterations", spec.label(), init.parameter_count(), c.train.max_iterations);
    let (state, history) = train(init, &split.train, &split.devel, &c.dsp, &c.train_config())?;
    let seconds = t0.elapsed().as_secs_f64();
    let devel = report_or_none(&state, &exp.features(split, Subset::Devel)?.0)?;
    let test = report_or_none(&state, &exp.features(split, Subset::Test)?.0)?;
    let ckpt = exp.path(&format!("{dir}{CHECKPOINT_FILE}"));
    save_checkpoint(&state, &ckpt)?;
    exp.written.push(ckpt);
    exp.write(&format!("{dir}history.csv"), history_csv(&history).as_bytes())?;
    exp.write_json(&format!("{dir}metrics.json"), &serde_json::json!({ "devel": devel, "test": test }))?;
    Ok(TrainOutcome { state, history, devel, test, seconds })
}

pub fn cmd_train(exp: &mut Experiment) -> Result<TrainOutcome> {
    let split = exp.dataset()?;
    let spec = exp.config.model_spec();
    let out = train_variant(exp, &split, &spec, "")?;
    exp.finish()?;
    Ok(out)
}

pub fn cmd_evaluate(exp: &mut Experiment, checkpoint: Option<&Path>, subset: Subset) -> Result<MetricsReport> {
    let state = exp.load_model(checkpoint)?;
    let split = exp.dataset()?;
    let (feats, _) = exp.features(&split, subset)?;
    if feats.is_empty() {
        anyhow::bail!("the {subset} split is empty");
    }
    let report = evaluate_features(&state, &feats)?;
    exp.write_json(&format!("metrics_{subset}.json"), &report)?;
    let row = TableRow::from_reports(state.spec.label(), None, Some(&report));
    exp.write(&format!("metrics_{subset}.md"), format_table(&[row], TableStyle::Sota).as_bytes())?;
    exp.finish()?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub success_rate: f64,
    pub clean_correct: usize,
    pub records: Vec<TraceRecord>,
}

pub fn cmd_attack(exp: &mut Experiment, checkpoint: Option<&Path>, subset: Subset) -> Result<AttackOutcome> {
    let state = exp.load_model(checkpoint)?;
    let split = exp.dataset()?;
    let clip = exp.clip(&split)?;
    let (feats, _) = exp.features(&split, subset)?;
    if feats.is_empty() {
        anyhow::bail!("the {subset} split is empty");
    }
    let cfg = exp.config.attack_config(clip);
    let records = attack_features(&state, &feats, &cfg)?;
    let rate = success_rate(&records);
    let clean_correct = records.iter().filter(|r| r.original_prediction == r.true_label).count();
    let path = exp.path(&format!("attack_{subset}.jsonl"));
    write_traces_jsonl(&path, &records)?;
    exp.written.push(path);
    exp.write_json(
        &format!("attack_{subset}.json"),
        &serde_json::json!({ "config": cfg, "split": subset, "clean_correct": clean_correct, "success_rate": rate }),
    )?;
    exp.finish()?;
    Ok(AttackOutcome { success_rate: rate, clean_correct, records })
}

#[derive(Clone, Debug)]
pub struct ExplainOutcome {
    pub profiles: ProfileSet,
    pub explanations: ExplanationSet,
    pub sensitivity: SensitivityReport,
    pub figures: Vec<PathBuf>,
}

pub fn cmd_explain(exp: &mut Experiment, checkpoint: Option<&Path>, subset: Subset) -> Result<ExplainOutcome> {
    let state = exp.load_model(checkpoint)?;
    let split = exp.dataset()?;
    let clip = exp.clip(&split)?;
    let (feats, _) = exp.features(&split, subset)?;
    if feats.is_empty() {
        anyhow::bail!("the {subset} split is empty");
    }
    let c = exp.config.clone();
    let profiles = profile_features(&state, &feats, &c.profile_config(clip))?;
    let explanations = explanation_set(&profiles, c.explain.prototype_steps, c.criticism_epsilon())?;
    let i_values: Vec<usize> = (1..=c.explain.i_max).collect();
    let sensitivity = sensitivity_report(&profiles, &i_values, &c.explain.eps_grid)?;

    exp.write_json("profiles.json", &profiles)?;
    exp.write_json("explanations.json", &explanations)?;
    exp.write("sensitivity.md", sensitivity.markdown().as_bytes())?;
    exp.write("sensitivity_prototypes.csv", sensitivity.prototype_csv().as_bytes())?;
    exp.write("sensitivity_criticisms.csv", sensitivity.criticism_csv().as_bytes())?;
    let per_class = |counts: &[[usize; 4]]| -> Vec<(&'static str, Vec<f64>)> {
        Class::ALL.iter().map(|cl| (cl.name(), counts.iter().map(|r| r[cl.index()] as f64).collect())).collect()
    };
    let xs: Vec<String> = i_values.iter().map(|v| v.to_string()).collect();
    let svg = plot::line_chart_svg("Prototypes", "IFGSM steps I", &xs, &per_class(&sensitivity.prototype_counts));
    exp.write("prototypes_vs_steps.svg", svg.as_bytes())?;
    let xs: Vec<String> = c.explain.eps_grid.iter().map(|v| v.to_string()).collect();
    let svg = plot::line_chart_svg("Criticisms", "FGSM epsilon", &xs, &per_class(&sensitivity.criticism_counts));
    exp.write("criticisms_vs_epsilon.svg", svg.as_bytes())?;

    let figures = if state.spec.head == HeadKind::Attention {
        exemplar_figures(exp, &state, &feats, &explanations)?
    } else {
        log::warn!("{} has no attention head; skipping attention projections", state.spec.label());
        Vec::new()
    };
    exp.finish()?;
    Ok(ExplainOutcome { profiles, explanations, sensitivity, figures })
}

/// Prototype, its masked projection, criticism, its masked projection; up to
/// `exemplars` figures per class. Most robust prototypes and most fragile
/// criticisms come first. A missing partner leaves its panels empty.
fn exemplar_figures(exp: &mut Experiment, state: &ModelState, feats: &[LogMelFeature], set: &ExplanationSet) -> Result<Vec<PathBuf>> {
    let by_id: BTreeMap<&str, &LogMelFeature> = feats.iter().map(|f| (f.source.id.as_str(), f)).collect();
    let rule = exp.config.explain.threshold;
    let floor = LOG_FLOOR.ln();
    let mut out = Vec::new();
    for ce in &set.classes {
        let mut protos = ce.prototypes.clone();
        protos.sort_by(|a, b| b.survival_depth.cmp(&a.survival_depth).then_with(|| a.cycle.id.cmp(&b.cycle.id)));
        let mut crits = ce.criticisms.clone();
        crits.sort_by(|a, b| {
            let key = |m: &respex::spectrum::Member| m.single_step_failure_eps.unwrap_or(f64::INFINITY);
            key(a).total_cmp(&key(b)).then_with(|| a.cycle.id.cmp(&b.cycle.id))
        });
        let n = exp.config.explain.exemplars.min(protos.len().max(crits.len()));
        for k in 0..n {
            let mut panels = Vec::with_capacity(4);
            for member in [protos.get(k), crits.get(k)] {
                match member.and_then(|m| by_id.get(m.cycle.id.as_str())) {
                    Some(f) => {
                        let proj = project_feature(state, &f.values, rule)?;
                        panels.push(f.values.clone());
                        panels.push(proj.masked);
                    }
                    None => {
                        let blank = ndarray::Array2::from_elem(exp.config.dsp.feature_shape(), floor);
                        panels.push(blank.clone());
                        panels.push(blank);
                    }
                }
            }
            let path = exp.path(&format!("figures/{}_{}.png", ce.class.name(), k + 1));
            match plot::write_panels_png(&path, &panels, floor) {
                Ok(()) => {
                    exp.written.push(path.clone());
                    out.push(path);
                }
                Err(e) => log::warn!("figure not written: {e:#}"),
            }
        }
    }
    Ok(out)
}

/// Trains and evaluates each variant; failed variants appear as rows of `--`.
pub fn cmd_ablation(exp: &mut Experiment, variants: &[ModelSpec]) -> Result<String> {
    let split = exp.dataset()?;
    let mut rows = Vec::with_capacity(variants.len());
    let mut failures = 0;
    for v in variants {
        let mut spec = v.clone();
        spec.input_shape = exp.config.dsp.feature_shape();
        let label = spec.label();
        match train_variant(exp, &split, &spec, &format!("ablation/{label}/")) {
            Ok(o) => rows.push(TableRow::from_reports(label, o.devel.as_ref(), o.test.as_ref())),
            Err(e) => {
                log::error!("{label} failed: {e:#}");
                failures += 1;
                rows.push(TableRow { name: label, ..Default::default() });
            }
        }
    }
    let table = format_table(&rows, TableStyle::Ablation);
    exp.write("ablation.md", table.as_bytes())?;
    exp.finish()?;
    if failures > 0 {
        anyhow::bail!("{failures} of {} variants failed; partial table written", variants.len());
    }
    Ok(table)
}

/// The eight encoder × dilation × head variants at the configured width, or
/// the subset whose labels are listed.
pub fn ablation_variants(config: &ExperimentConfig, labels: &[String]) -> Result<Vec<ModelSpec>> {
    let all: Vec<ModelSpec> =
        ModelSpec::all_variants().into_iter().map(|s| s.with_base_channels(config.model.base_channels)).collect();
    if labels.is_empty() {
        return Ok(all);
    }
    labels
        .iter()
        .map(|l| {
            all.iter().find(|s| s.label().eq_ignore_ascii_case(l)).cloned().with_context(|| {
                format!("unknown variant {l}; expected one of {:?}", all.iter().map(|s| s.label()).collect::<Vec<_>>())
            })
        })
        .collect()
}
