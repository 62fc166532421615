use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sbr_core::dataset::{compute_stats, read_dataset, write_dataset};
use sbr_core::harness::{
    build_splits, load_base_split, read_manifests, read_metrics, run_experiment_on, summarize_ranks, tune_algorithm,
    ExperimentConfig, RANK_CUTOFF,
};
use sbr_core::metamodel::{build_meta_table, cross_validate, fit_tree, write_meta_table, TreeConfig};
use sbr_core::tuning::config_to_json;
use sbr_core::Error;

#[derive(Parser)]
#[command(name = "sbrbench", version, about = "Session-based recommendation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long, env = "SBR_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Overrides `workers`; 0 uses every core.
    #[arg(long, env = "SBR_WORKERS")]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut config = ExperimentConfig::load(&self.config)
            .map_err(|e| Error::Config(format!("{}: {e}", self.config.display())))?;
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(w) = self.workers {
            config.workers = w;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and preprocess the configured dataset; cache it in canonical form.
    Prep(ConfigArgs),
    /// Print statistics of a canonical dataset file.
    Stats { path: PathBuf },
    /// Generate the configured splits and write their manifests and data.
    Split(ConfigArgs),
    /// Tune every configured algorithm on every split; no final evaluation.
    Tune(ConfigArgs),
    /// Run the full split × algorithm grid.
    Run(ConfigArgs),
    /// Build the meta-feature table from results, fit the tree, cross-validate.
    Meta {
        /// Results directories produced by `run`.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = TreeConfig::default().max_depth)]
        max_depth: usize,
        #[arg(long, default_value_t = TreeConfig::default().min_impurity)]
        min_impurity: f64,
    },
    /// Rank models per experiment by HR and MRR and summarize the distributions.
    Ranks {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = RANK_CUTOFF)]
        k: usize,
    },
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::InvalidSpec(_) | Error::MissingColumn(_))
        )
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn prep(args: &ConfigArgs) -> anyhow::Result<i32> {
    let config = args.load()?;
    let base = load_base_split(&config.dataset, &config.preprocess)?;
    let dir = config.output_dir.join("data");
    create_dir(&dir)?;
    write_dataset(&base.full, dir.join("full.jsonl"))?;
    write_dataset(&base.train, dir.join("train.jsonl"))?;
    write_dataset(&base.test, dir.join("test.jsonl"))?;
    let stats = serde_json::json!({
        "full": compute_stats(&base.full)?,
        "train": compute_stats(&base.train)?,
        "test": compute_stats(&base.test)?,
        "source_hash": base.source_hash(),
    });
    write_json(&dir.join("stats.json"), &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(0)
}

fn split(args: &ConfigArgs) -> anyhow::Result<i32> {
    let config = args.load()?;
    let base = load_base_split(&config.dataset, &config.preprocess)?;
    let root = config.output_dir.join("splits");
    let mut failed = 0;
    for (name, result) in build_splits(&base, &config) {
        match result {
            Ok(s) => {
                let dir = root.join(&name);
                create_dir(&dir)?;
                write_dataset(&s.train, dir.join("train.jsonl"))?;
                write_dataset(&s.test, dir.join("test.jsonl"))?;
                fs::write(dir.join("manifest.json"), s.manifest.to_json())?;
                println!(
                    "{name}\t{}\ttrain {} sessions\ttest {} sessions",
                    s.manifest.id(),
                    s.manifest.train.sessions,
                    s.manifest.test.sessions
                );
            }
            Err(e) => {
                failed += 1;
                eprintln!("{name}: {e}");
            }
        }
    }
    Ok(i32::from(failed > 0))
}

fn tune(args: &ConfigArgs) -> anyhow::Result<i32> {
    let config = args.load()?;
    let base = load_base_split(&config.dataset, &config.preprocess)?;
    let dir = config.output_dir.join("tuning");
    create_dir(&dir)?;
    let mut out = BufWriter::new(File::create(dir.join("best.jsonl"))?);
    let mut failed = 0;
    for (name, result) in build_splits(&base, &config) {
        for spec in config.algorithms.iter().filter(|a| a.tune) {
            let model = spec.display_name()?;
            let outcome = result
                .as_ref()
                .map_err(|e| anyhow::anyhow!("{e}"))
                .and_then(|s| Ok(tune_algorithm(spec, s, config.seed, &dir)?));
            let line = match outcome {
                Ok(r) => serde_json::json!({
                    "split": name, "model": model, "best_trial": r.best_trial,
                    "hr20": r.best_score, "config": config_to_json(&r.best), "trials": r.trials,
                }),
                Err(e) => {
                    failed += 1;
                    eprintln!("{name}/{model}: {e}");
                    serde_json::json!({ "split": name, "model": model, "error": e.to_string() })
                }
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(i32::from(failed > 0))
}

fn run(args: &ConfigArgs) -> anyhow::Result<i32> {
    let config = args.load()?;
    let base = load_base_split(&config.dataset, &config.preprocess)?;
    let summary = run_experiment_on(&config, &base)?;
    for c in &summary.cells {
        let state = match (&c.error, c.reused) {
            (Some(e), _) => format!("FAILED: {e}"),
            (None, true) => "ok (reused)".into(),
            (None, false) => "ok".into(),
        };
        println!("{}\t{}\t{state}", c.split, c.model);
    }
    println!("results in {}", summary.output_dir.display());
    Ok(summary.exit_code())
}

fn meta(results: &[PathBuf], out: &Path, folds: usize, seed: u64, config: TreeConfig) -> anyhow::Result<i32> {
    let mut records = Vec::new();
    let mut manifests = HashMap::new();
    for dir in results {
        records.extend(read_metrics(dir)?);
        manifests.extend(read_manifests(dir)?);
    }
    let table = build_meta_table(&records, &manifests)?;
    create_dir(out)?;
    write_meta_table(&table, File::create(out.join("meta_table.csv"))?)?;
    let tree = fit_tree(&table, &config)?;
    fs::write(out.join("tree.txt"), tree.to_text())?;
    fs::write(out.join("tree.dot"), tree.to_dot())?;
    let cv = if table.len() >= folds.max(2) {
        Some(cross_validate(&table, folds, seed, &config)?)
    } else {
        log::warn!(
            "{} instances are too few for {folds}-fold cross-validation",
            table.len()
        );
        None
    };
    let report = serde_json::json!({
        "instances": table.len(),
        "depth": tree.depth(),
        "train_accuracy": tree.accuracy(&table),
        "cross_validation": cv,
        "folds": folds,
    });
    write_json(&out.join("meta.json"), &report)?;
    print!("{}", tree.to_text());
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn ranks(results: &[PathBuf], out: &Path, k: usize) -> anyhow::Result<i32> {
    let mut records = Vec::new();
    for dir in results {
        records.extend(read_metrics(dir)?);
    }
    let summary = summarize_ranks(&records, k)?;
    if !summary.dropped.is_empty() {
        eprintln!(
            "warning: not in every experiment, left out: {}",
            summary.dropped.join(", ")
        );
    }
    create_dir(out)?;
    summary.write_csv(File::create(out.join("ranks.csv"))?)?;
    write_json(&out.join("ranks.vl.json"), &summary.vega_lite())?;
    for ((metric, model), mean) in summary.mean_ranks() {
        println!("{metric}\t{model}\t{mean:.3}");
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Prep(a) => prep(&a),
        Command::Stats { path } => {
            let ds = read_dataset(&path)?;
            println!("{}", serde_json::to_string_pretty(&compute_stats(&ds)?)?);
            Ok(0)
        }
        Command::Split(a) => split(&a),
        Command::Tune(a) => tune(&a),
        Command::Run(a) => run(&a),
        Command::Meta {
            results,
            out,
            folds,
            seed,
            max_depth,
            min_impurity,
        } => meta(
            &results,
            &out,
            folds,
            seed,
            TreeConfig {
                max_depth,
                min_impurity,
            },
        ),
        Command::Ranks { results, out, k } => ranks(&results, &out, k),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
