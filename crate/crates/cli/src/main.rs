//! `tirg`: generate the CSS dataset, train and evaluate composition models,
//! inspect the identity path and run the built-in self-checks.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tirg_core::dataset::{build_dataset, Split, SplitData};
use tirg_core::retrieval::{evaluate_model, query_inputs};
use tirg_core::tensor::OpKind;
use tirg_core::train::mean_std;
use tirg_core::{selfcheck, train, Error, Kernel, LayerMode, Model, RunConfig, Strategy, TrainRecord};

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "log.jsonl";

#[derive(Parser)]
#[command(name = "tirg", version, about = "Image+text composed-query retrieval on synthetic CSS scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and test splits to disk.
    Generate(GenerateArgs),
    /// Train a model (optionally over several seeds) and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the recall table.
    Eval(EvalArgs),
    /// Report how much of the composed feature comes from the gated image path.
    Diagnose(DiagnoseArgs),
    /// Run the gradient, loss, dataset and ranking self-checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_base: Option<usize>,
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory produced by `generate` (holds `train/` and `test/`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    layer_mode: Option<LayerMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    kernel: Option<Kernel>,
    /// First seed; a sweep uses `seed, seed+1, ...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds; more than one writes `seed-<n>/` subdirectories and an aggregate summary.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A split directory, or a dataset directory whose `test/` split is used.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the `config.toml` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated cutoffs, e.g. `1,5,10,50`.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    max_queries: Option<usize>,
    /// Directory for `eval.json`; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Queries averaged over; defaults to `train.identity_queries`.
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one op's backward pass (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<OpKind>,
}

/// Why a command stopped; each maps to one exit code.
enum Failure {
    Usage(String),
    Verification(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Argument(_) | Error::Dimension { .. } => 2,
                Error::NonFinite { .. } | Error::Diverged { .. } => 1,
                _ => 3,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Verification(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Selfcheck(a) => selfcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn generate(a: GenerateArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.n_base {
        cfg.dataset.n_base = n;
    }
    if let Some(n) = a.n_queries {
        cfg.dataset.n_queries = n;
    }
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    cfg.validate()?;

    let (train, test) = build_dataset(&cfg.dataset)?;
    create_dir(&a.out)?;
    for m in [&train, &test] {
        m.write(&a.out.join(m.split.name()))?;
        println!(
            "{:<5} condition {}  base scenes {:>5}  queries {:>6}  images {:>6}",
            m.split.name(),
            m.condition,
            m.base_count(),
            m.queries.len(),
            m.scenes.len()
        );
    }
    cfg.save(&a.out.join(CONFIG_FILE))?;
    println!("total images {}", train.scenes.len() + test.scenes.len());
    Ok(())
}

/// Reads `dir` itself if it holds a manifest, otherwise `dir/<split>`.
fn read_split(dir: &Path, split: Split) -> Result<SplitData, Error> {
    let direct = dir.join("manifest.json");
    let path = if direct.exists() { dir.to_path_buf() } else { dir.join(split.name()) };
    SplitData::read(&path)
}

fn check_canvas(cfg: &RunConfig, data: &SplitData) -> Result<(), Error> {
    if data.manifest.canvas_px != cfg.model.image.canvas_px {
        return Err(Error::Data(format!(
            "images are {} px but the model expects {} px",
            data.manifest.canvas_px, cfg.model.image.canvas_px
        )));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.strategy {
        cfg.model.composition.strategy = s;
    }
    if let Some(m) = a.layer_mode {
        cfg.model.composition.layer_mode = m;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        t.momentum = v;
    }
    if let Some(v) = a.k {
        t.k = v;
    }
    if let Some(v) = a.kernel {
        t.kernel = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    cfg.validate()?;

    let train_data = read_split(&a.data.join(Split::Train.name()), Split::Train)?;
    let test_data = read_split(&a.data.join(Split::Test.name()), Split::Test)?;
    check_canvas(&cfg, &train_data)?;
    check_canvas(&cfg, &test_data)?;
    create_dir(&a.out)?;

    let first = cfg.train.seed;
    let mut finals = Vec::new();
    for i in 0..a.seeds as u64 {
        let mut run = cfg.clone();
        run.train.seed = first + i;
        let dir = if a.seeds == 1 { a.out.clone() } else { a.out.join(format!("seed-{}", first + i)) };
        finals.push(train_one(&run, &train_data, &test_data, &dir)?);
    }

    if a.seeds > 1 {
        cfg.save(&a.out.join(CONFIG_FILE))?;
        let mut per_k = serde_json::Map::new();
        for k in &cfg.eval.ks {
            let vals: Vec<f64> = finals.iter().map(|r| r.recall[k]).collect();
            let (mean, std) = mean_std(&vals);
            per_k.insert(format!("r{k}"), json!({ "mean": mean, "std": std, "values": vals }));
        }
        let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| first + i).collect();
        write_json(
            &a.out.join("summary.json"),
            &json!({ "strategy": cfg.model.composition.strategy, "seeds": seeds, "recall": per_k }),
        )?;
        println!("{} over {} seeds", cfg.model.composition.strategy, a.seeds);
        for k in &cfg.eval.ks {
            let v = &per_k[&format!("r{k}")];
            println!("  R@{k:<3} {:6.2} ± {:.2}", v["mean"].as_f64().unwrap(), v["std"].as_f64().unwrap());
        }
    }
    Ok(())
}

fn train_one(
    cfg: &RunConfig,
    train_data: &SplitData,
    test_data: &SplitData,
    dir: &Path,
) -> Result<tirg_core::EvalReport, Error> {
    create_dir(dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let log_path = dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let start = Instant::now();
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let records = train(&mut model, &cfg.train, train_data, Some(test_data), |r: &TrainRecord| {
        let line = serde_json::to_string(r)?;
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))
    })?;
    model.save(&dir.join(CHECKPOINT_FILE))?;

    let report = evaluate_model(&model, test_data, cfg.train.kernel, &cfg.eval, cfg.fingerprint()?)?;
    write_json(&dir.join("eval.json"), &serde_json::to_value(&report)?)?;
    let last = records.last();
    let loss = records.iter().rev().find_map(|r| r.loss);
    write_json(
        &dir.join("summary.json"),
        &json!({
            "strategy": cfg.model.composition.strategy,
            "seed": cfg.train.seed,
            "iterations": cfg.train.iterations,
            "final_loss": loss,
            "identity_contribution": last.and_then(|r| r.identity_contribution),
            "recall": report.recall,
        }),
    )?;
    println!(
        "{} seed {}: loss {}  R@1 {:.2}  ({:.1} s)",
        cfg.model.composition.strategy,
        cfg.train.seed,
        loss.map_or("n/a".to_string(), |l| format!("{l:.4}")),
        report.recall.get(&1).copied().unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    Ok(report)
}

/// The checkpoint's model, built from `--config` or the snapshot beside it.
fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(RunConfig, Model), Error> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let model = Model::load(cfg.model.clone(), checkpoint)?;
    Ok((cfg, model))
}

fn eval(a: EvalArgs) -> CmdResult {
    let (mut cfg, model) = load_model(&a.checkpoint, a.config.as_deref())?;
    if let Some(ks) = a.ks {
        cfg.eval.ks = ks;
    }
    if a.max_queries.is_some() {
        cfg.eval.max_queries = a.max_queries;
    }
    cfg.validate()?;
    let data = read_split(&a.data, Split::Test)?;
    check_canvas(&cfg, &data)?;

    let report = evaluate_model(&model, &data, cfg.train.kernel, &cfg.eval, cfg.fingerprint()?)?;
    print!("{}", report.to_table());
    let ckpt_dir = a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out = a.out.unwrap_or_else(|| ckpt_dir.clone());
    create_dir(&out)?;
    write_json(&out.join("eval.json"), &serde_json::to_value(&report).map_err(Error::from)?)?;
    if out != ckpt_dir {
        cfg.save(&out.join(CONFIG_FILE))?;
    }
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> CmdResult {
    let (cfg, model) = load_model(&a.checkpoint, a.config.as_deref())?;
    if model.strategy() != Strategy::Tirg {
        return Err(Failure::Usage(format!(
            "identity contribution is defined only for TIRG (gate + residual) models; this checkpoint is {}",
            model.strategy()
        )));
    }
    let data = read_split(&a.data, Split::Test)?;
    check_canvas(&cfg, &data)?;
    let n = a.queries.unwrap_or(cfg.train.identity_queries).min(data.queries().len());
    if n == 0 {
        return Err(Failure::Usage("no queries to diagnose".into()));
    }
    let ic = model
        .identity_contribution(&query_inputs(&data, n))?
        .expect("TIRG always has an identity path");
    println!("identity contribution {:.4} over {} queries", ic.mean, ic.samples);
    if ic.degenerate > 0 {
        println!("  {} queries had both paths at zero norm (counted as 0.5)", ic.degenerate);
    }

    let log_path = a.checkpoint.parent().unwrap_or(Path::new(".")).join(LOG_FILE);
    if let Ok(text) = fs::read_to_string(&log_path) {
        println!("trajectory ({})", log_path.display());
        println!("  {:>7}  {:>8}  {:>7}", "iter", "identity", "R@1");
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: TrainRecord = serde_json::from_str(line).map_err(Error::from)?;
            let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
            println!("  {:>7}  {:>8}  {:>7}", r.iter, fmt(r.identity_contribution, 4), fmt(r.r1, 2));
        }
    }
    Ok(())
}

fn selfcheck_cmd(a: SelfcheckArgs) -> CmdResult {
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let results = selfcheck::run_all(a.corrupt, a.instances, a.seed);
    let mut failed = Vec::new();
    for r in &results {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        println!("{mark}  {:<22} {:>7.2} s  {}", r.name, r.seconds, r.detail);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("failed suites: {}", failed.join(", "))))
    }
}
