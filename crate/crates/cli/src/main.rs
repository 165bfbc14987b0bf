use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use respex::dataset::Subset;
use respex::metrics::percent;
use respex_cli::{
    ablation_variants, cmd_ablation, cmd_attack, cmd_evaluate, cmd_explain, cmd_prepare, cmd_train, Experiment,
    ExperimentConfig,
};

#[derive(Parser, Debug)]
#[command(name = "respex", about = "Respiratory-sound classifiers explained by prototypes and criticisms")]
struct Args {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "respex.toml")]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model to load; defaults to <out>/model.ckpt.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Split to evaluate, attack or explain (train, devel, test).
    #[arg(long, global = true)]
    split: Option<Subset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load or synthesize the corpus, split it and cache features.
    Prepare,
    /// Train the configured model and keep the best devel checkpoint.
    Train,
    /// Metrics of a checkpoint on one split (default test).
    Evaluate,
    /// IFGSM success rate on one split (default test).
    Attack,
    /// Prototypes, criticisms, sensitivity tables and figures (default: config split).
    Explain,
    /// Train and evaluate encoder/dilation/head variants.
    Ablation {
        /// Variant labels such as CNN8-Att or ResNet-Dila; all eight when empty.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Print the desk-scale synthetic config.
    DefaultConfig,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Command::DefaultConfig = args.command {
        print!("{}", ExperimentConfig::synthetic("runs/synthetic").to_toml());
        return Ok(());
    }
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(out) = args.out {
        config.out = out;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let explain_split = config.explain.split;
    let mut exp = Experiment::new(config)?;
    let ckpt = args.checkpoint.as_deref();
    match args.command {
        Command::Prepare => {
            let o = cmd_prepare(&mut exp)?;
            print!("{}", o.summary);
        }
        Command::Train => {
            let o = cmd_train(&mut exp)?;
            if let Some(r) = o.devel {
                println!("devel UAR {} AS {}", percent(r.uar), percent(r.as_score));
            }
            if let Some(r) = o.test {
                println!("test UAR {} AS {}", percent(r.uar), percent(r.as_score));
            }
            println!("trained in {:.1} s", o.seconds);
        }
        Command::Evaluate => {
            let split = args.split.unwrap_or(Subset::Test);
            let r = cmd_evaluate(&mut exp, ckpt, split)?;
            println!(
                "{split}: UAR {} SE {} SP {} AS {} (n = {})",
                percent(r.uar),
                percent(r.se),
                percent(r.sp),
                percent(r.as_score),
                r.n
            );
        }
        Command::Attack => {
            let split = args.split.unwrap_or(Subset::Test);
            let o = cmd_attack(&mut exp, ckpt, split)?;
            println!("{split}: attack fooled {} of {} clean-correct samples", percent(o.success_rate), o.clean_correct);
        }
        Command::Explain => {
            let split = args.split.unwrap_or(explain_split);
            let o = cmd_explain(&mut exp, ckpt, split)?;
            print!("{}", o.sensitivity.markdown());
            println!("removed overlap: {}", o.explanations.removed_overlap);
        }
        Command::Ablation { variants } => {
            let specs = ablation_variants(&exp.config, &variants)?;
            print!("{}", cmd_ablation(&mut exp, &specs)?);
        }
        Command::DefaultConfig => unreachable!(),
    }
    Ok(())
}
