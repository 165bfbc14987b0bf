use std::path::Path;
use std::process::Command;

use respex::dataset::Subset;
use respex::metrics::percent;
use respex::model::{Encoder, HeadKind};
use respex_cli::config::{ExplainSection, ModelSection, TrainSection};
use respex_cli::{
    ablation_variants, cmd_ablation, cmd_explain, cmd_prepare, cmd_train, DataSource, Experiment, ExperimentConfig,
    Manifest, MANIFEST_FILE,
};
use sha2::{Digest, Sha256};

/// A few seconds of work end to end.
fn small(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::synthetic(out);
    c.data = DataSource::Synthetic { n_per_class: 6, duration: 4.0, sample_rate: 4000 };
    c.model = ModelSection { encoder: Encoder::Cnn8, dilated: false, head: HeadKind::Attention, base_channels: 2 };
    c.train = TrainSection { batch_size: 4, max_iterations: 20, eval_every: 10, ..Default::default() };
    c.explain = ExplainSection {
        i_max: 4,
        eps_grid: vec![0.001, 0.01, 0.1, 1.0],
        epsilon: 0.01,
        prototype_steps: 2,
        exemplars: 1,
        ..Default::default()
    };
    c
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn sha(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = ExperimentConfig::synthetic("runs/a");
    c.explain.criticism_epsilon = Some(0.01);
    c.attack.clip = respex_cli::ClipSetting::Range(respex::attack::ClipRange { min: -20.0, max: 4.5 });
    let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());

    let icbhi = ExperimentConfig {
        data: DataSource::Icbhi {
            audio_dir: "data/audio".into(),
            annotation_dir: "data/audio".into(),
            split_listing: "data/split.txt".into(),
        },
        ..ExperimentConfig::synthetic("runs/b")
    };
    let back: ExperimentConfig = toml::from_str(&icbhi.to_toml()).unwrap();
    assert_eq!(back, icbhi);
    assert!(icbhi.validate().is_err(), "missing corpus paths must be rejected");

    let minimal = "seed = 3\nout = \"x\"\n[data]\nsource = \"synthetic\"\nn_per_class = 2\nduration = 1.0\nsample_rate = 4000\n";
    let m: ExperimentConfig = toml::from_str(minimal).unwrap();
    assert_eq!(m.model, ModelSection::default());
    assert!(toml::from_str::<ExperimentConfig>(&format!("{minimal}bogus = 1\n")).is_err());
}

#[test]
fn invalid_explain_settings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.explain.criticism_epsilon = Some(0.5);
    assert!(c.validate().unwrap_err().to_string().contains("grid"));
    let mut c = small(dir.path());
    c.explain.prototype_steps = 9;
    assert!(c.validate().is_err());
}

#[test]
fn prepare_prints_balanced_classes_and_reuses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::new(small(dir.path())).unwrap();
    let first = cmd_prepare(&mut exp).unwrap();
    assert_eq!(first.cache_hits, [false; 3]);
    let totals: Vec<&str> = first
        .summary
        .lines()
        .filter(|l| ["normal", "crackle", "wheeze", "both"].iter().any(|c| l.to_lowercase().starts_with(&format!("| {c} "))))
        .map(|l| l.trim_end_matches(" |").rsplit(' ').next().unwrap())
        .collect();
    assert_eq!(totals, ["6"; 4], "{}", first.summary);

    let cache = dir.path().join("cache/train.features");
    let stamp = std::fs::metadata(&cache).unwrap().modified().unwrap();
    let second = cmd_prepare(&mut exp).unwrap();
    assert_eq!(second.cache_hits, [true; 3]);
    assert_eq!(second.summary, first.summary);
    assert_eq!(std::fs::metadata(&cache).unwrap().modified().unwrap(), stamp, "cache was rewritten");

    let mut other = small(dir.path());
    other.dsp.bandpass_high = 1700.0;
    let mut exp = Experiment::new(other).unwrap();
    assert_eq!(cmd_prepare(&mut exp).unwrap().cache_hits, [false; 3], "a dsp change must invalidate the cache");
}

#[test]
fn training_is_reproducible_and_logs_every_evaluation() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_train(&mut Experiment::new(small(a.path())).unwrap()).unwrap();
    let rb = cmd_train(&mut Experiment::new(small(b.path())).unwrap()).unwrap();
    let ha = std::fs::read_to_string(a.path().join("history.csv")).unwrap();
    let hb = std::fs::read_to_string(b.path().join("history.csv")).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(csv_rows(&ha).len(), 20 / 10);
    assert_eq!(ra.history, rb.history);
    assert_eq!(sha(&a.path().join("model.ckpt")), sha(&b.path().join("model.ckpt")));

    // Rerunning in place overwrites with identical bytes.
    let before = sha(&a.path().join("model.ckpt"));
    cmd_train(&mut Experiment::new(small(a.path())).unwrap()).unwrap();
    assert_eq!(sha(&a.path().join("model.ckpt")), before);
    assert_eq!(std::fs::read_to_string(a.path().join("history.csv")).unwrap(), ha);

    let mut other = small(b.path());
    other.seed = 8;
    let rc = cmd_train(&mut Experiment::new(other).unwrap()).unwrap();
    assert_ne!(rc.history, ra.history, "a different seed should change the run");
}

#[test]
fn explain_emits_tables_plots_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let mut exp = Experiment::new(cfg.clone()).unwrap();
    cmd_train(&mut exp).unwrap();
    let o = cmd_explain(&mut exp, None, Subset::Devel).unwrap();

    let protos = csv_rows(&std::fs::read_to_string(dir.path().join("sensitivity_prototypes.csv")).unwrap());
    assert_eq!(protos.len(), cfg.explain.i_max);
    for (row, (i, counts)) in protos.iter().zip(o.sensitivity.i_values.iter().zip(&o.sensitivity.prototype_counts)) {
        assert_eq!(row[0], i.to_string());
        let parsed: Vec<usize> = row[1..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, counts.to_vec());
    }
    for w in protos.windows(2) {
        for k in 1..=4 {
            assert!(w[1][k].parse::<usize>().unwrap() <= w[0][k].parse::<usize>().unwrap());
        }
    }
    let crits = csv_rows(&std::fs::read_to_string(dir.path().join("sensitivity_criticisms.csv")).unwrap());
    for (row, counts) in crits.iter().zip(&o.sensitivity.criticism_counts) {
        let parsed: Vec<usize> = row[1..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, counts.to_vec());
    }
    assert_eq!(
        std::fs::read_to_string(dir.path().join("sensitivity.md")).unwrap(),
        o.sensitivity.markdown()
    );

    let svg = std::fs::read_to_string(dir.path().join("prototypes_vs_steps.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    assert!(dir.path().join("criticisms_vs_epsilon.svg").exists());

    let json: respex::spectrum::ExplanationSet =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("explanations.json")).unwrap()).unwrap();
    assert_eq!(json, o.explanations);
    for c in &json.classes {
        for p in &c.prototypes {
            assert!(c.criticisms.iter().all(|q| q.cycle != p.cycle));
        }
    }
    assert!(!o.figures.is_empty());
    for f in &o.figures {
        let img = image::open(f).unwrap();
        assert_eq!(img.height(), 2 * 128);
        assert_eq!(img.width(), 4 * 2 * 126 + 3 * 4);
    }
}

#[test]
fn zero_epsilon_grid_gives_no_criticisms() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.explain.eps_grid = vec![0.0];
    cfg.explain.epsilon = 0.0;
    let mut exp = Experiment::new(cfg).unwrap();
    cmd_train(&mut exp).unwrap();
    let o = cmd_explain(&mut exp, None, Subset::Devel).unwrap();
    let crits = csv_rows(&std::fs::read_to_string(dir.path().join("sensitivity_criticisms.csv")).unwrap());
    assert_eq!(crits, vec![vec!["0".to_string(), "0".into(), "0".into(), "0".into(), "0".into()]]);
    // ε = 0 never moves a sample, so every clean-correct sample survives every depth.
    let correct = o.profiles.profiles.iter().filter(|p| p.clean_correct).count();
    for row in &o.sensitivity.prototype_counts {
        assert_eq!(row.iter().sum::<usize>(), correct);
    }
}

#[test]
fn maxpool_head_skips_projections() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.model.head = HeadKind::MaxpoolFc;
    let mut exp = Experiment::new(cfg).unwrap();
    cmd_train(&mut exp).unwrap();
    let o = cmd_explain(&mut exp, None, Subset::Devel).unwrap();
    assert!(o.figures.is_empty());
    assert!(dir.path().join("explanations.json").exists());
    assert!(!dir.path().join("figures").exists());
}

#[test]
fn single_variant_ablation_matches_its_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let variants = ablation_variants(&cfg, &["resnet-att".to_string()]).unwrap();
    assert_eq!(variants.len(), 1);
    assert!(ablation_variants(&cfg, &["nope".to_string()]).is_err());
    assert_eq!(ablation_variants(&cfg, &[]).unwrap().len(), 8);

    let mut exp = Experiment::new(cfg).unwrap();
    let table = cmd_ablation(&mut exp, &variants).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 1, "{table}");
    let label = variants[0].label();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("ablation/{label}/metrics.json"))).unwrap())
            .unwrap();
    let v = |split: &str, key: &str| percent(metrics[split][key].as_f64().unwrap());
    let expected = [v("devel", "uar"), v("test", "uar"), v("devel", "as_score"), v("test", "se"), v("test", "sp"), v("test", "as_score")];
    let cells: Vec<String> =
        rows[0].trim_matches('|').split('|').skip(1).map(|c| c.trim().trim_matches('*').to_string()).collect();
    assert_eq!(cells, expected);
    assert_eq!(std::fs::read_to_string(dir.path().join("ablation.md")).unwrap(), table);
}

#[test]
fn manifest_hashes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let mut exp = Experiment::new(cfg.clone()).unwrap();
    cmd_prepare(&mut exp).unwrap();
    cmd_train(&mut exp).unwrap();
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    for name in ["dataset_summary.md", "split.json", "model.ckpt", "history.csv", "metrics.json", "cache/train.features"] {
        let h = m.artifacts.get(name).unwrap_or_else(|| panic!("{name} missing from manifest"));
        assert_eq!(h, &sha(&dir.path().join(name)), "{name}");
    }

    // A new config starts a fresh manifest.
    let mut other = cfg;
    other.seed = 11;
    let mut exp = Experiment::new(other.clone()).unwrap();
    cmd_prepare(&mut exp).unwrap();
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(m.config_hash, other.hash());
    assert!(!m.artifacts.contains_key("model.ckpt"));
}

#[test]
fn binary_runs_commands_and_reports_failures() {
    let bin = env!("CARGO_BIN_EXE_respex");
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin).arg("default-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(toml::from_str::<ExperimentConfig>(&text).unwrap(), ExperimentConfig::synthetic("runs/synthetic"));

    let cfg_path = dir.path().join("respex.toml");
    std::fs::write(&cfg_path, small(&dir.path().join("run")).to_toml()).unwrap();
    let run = |args: &[&str]| Command::new(bin).arg("--config").arg(&cfg_path).args(args).output().unwrap();

    let out = run(&["prepare"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| Total | "));
    let out = run(&["prepare"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("feature cache hit"));

    let out = run(&["evaluate"]);
    assert!(!out.status.success(), "evaluating without a checkpoint must fail");

    let out = run(&["train", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["evaluate", "--seed", "9", "--split", "devel"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("devel: UAR "));
    assert!(dir.path().join("run/metrics_devel.json").exists());

    let out = run(&["attack", "--seed", "9", "--split", "bogus"]);
    assert!(!out.status.success());
    let out = Command::new(bin).args(["--config", "/nonexistent.toml", "prepare"]).output().unwrap();
    assert!(!out.status.success());
}
