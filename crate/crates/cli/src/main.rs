//! `qodflow` experiment runner.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use qodflow::harness::{emit, run_experiment, write_cv_csv, ExperimentConfig, Policy};
use qodflow::learn::{cross_validate, evaluate, train, FeatureScope, ForestConfig, ForestModel};
use qodflow::workloads::{generate, GeneratorConfig, Scenario, Workload};
use qodflow::KnowledgeBase;

#[derive(Parser, Debug)]
#[command(
    name = "qodflow",
    version,
    about = "Quality-of-data driven workflow experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on synchronous waves, then run the application phase with a policy.
    Run(RunArgs),
    /// Write a synthetic input stream as CSV, replayable with `--workload replay:<file>`.
    Generate(GenerateArgs),
    /// Train a forest on a knowledge base CSV.
    Train(TrainArgs),
    /// Cross-validate a forest on a knowledge base CSV.
    Cv(CvArgs),
    /// Classify feature rows with a trained model.
    Classify(ClassifyArgs),
}

#[derive(Args, Debug, Clone)]
struct Synthetic {
    /// Generator seed; defaults to the run seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Grid side (AQHI, fire) or segments per expressway (LRB).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    expressways: Option<usize>,
    /// Vehicles per expressway (LRB).
    #[arg(long)]
    vehicles: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
}

impl Synthetic {
    fn config(&self, workload: Workload, seed: u64, waves: usize) -> GeneratorConfig {
        let mut cfg = GeneratorConfig::new(workload, self.data_seed.unwrap_or(seed), waves);
        if let Some(v) = self.size {
            cfg.size = v;
        }
        if let Some(v) = self.expressways {
            cfg.expressways = v;
        }
        if let Some(v) = self.vehicles {
            cfg.vehicles = v;
        }
        if let Some(v) = self.noise {
            cfg.noise = v;
        }
        if let Some(v) = self.drift {
            cfg.drift = v;
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// aqhi, lrb, fire or replay:<stream.csv>
    #[arg(long, default_value = "aqhi")]
    workload: String,
    #[arg(long, default_value_t = 0.05)]
    bound: f64,
    /// smartflux, sync, random, seq:<k> or oracle
    #[arg(long, default_value = "smartflux")]
    policy: String,
    #[arg(long, default_value_t = 168)]
    train_waves: usize,
    #[arg(long, default_value_t = 384)]
    waves: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 0.5)]
    vote_threshold: f64,
    /// Features each label's trees may split on: own or all.
    #[arg(long, default_value = "own")]
    scope: String,
    #[arg(long, default_value_t = 10)]
    cv_folds: usize,
    /// Minimum cross-validated accuracy and recall, e.g. `0.9,0.9`; extends training when missed.
    #[arg(long, value_parser = parse_pair)]
    gate: Option<(f64, f64)>,
    /// Force a tolerant step after this many consecutive skips.
    #[arg(long)]
    force_after: Option<u32>,
    /// Train on plain labels instead of lookahead labels.
    #[arg(long)]
    plain_labels: bool,
    /// Run the replica and the main workflow on separate threads.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    synthetic: Synthetic,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    workload: Workload,
    #[arg(long)]
    waves: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    synthetic: Synthetic,
}

#[derive(Args, Debug, Clone)]
struct ForestArgs {
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 0.5)]
    vote_threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "own")]
    scope: String,
}

impl ForestArgs {
    fn config(&self) -> Result<ForestConfig> {
        Ok(ForestConfig {
            trees: self.trees,
            vote_threshold: self.vote_threshold,
            seed: self.seed,
            scope: parse_scope(&self.scope)?,
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Knowledge base CSV, as written by `run`.
    #[arg(long)]
    knowledge: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    forest: ForestArgs,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    knowledge: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Per-label scores CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    forest: ForestArgs,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Knowledge base CSV whose feature columns are classified; its labels,
    /// when present, are scored.
    #[arg(long)]
    input: PathBuf,
    /// Override the model's vote threshold.
    #[arg(long)]
    vote_threshold: Option<f64>,
    /// Predictions CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `<accuracy>,<recall>`")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((num(a)?, num(b)?))
}

fn parse_scope(s: &str) -> Result<FeatureScope> {
    s.parse::<FeatureScope>()
        .map_err(|e| anyhow::anyhow!("{e}"))
}

fn load_scenario(args: &RunArgs, cfg: &ExperimentConfig) -> Result<Scenario> {
    if let Some(path) = args.workload.strip_prefix("replay:") {
        let file = File::open(path).with_context(|| format!("opening stream {path}"))?;
        return Ok(Scenario::read_stream_csv(BufReader::new(file))?);
    }
    let w: Workload = args.workload.parse()?;
    Ok(generate(
        w,
        &args.synthetic.config(w, args.seed, cfg.required_waves()),
    )?)
}

fn read_knowledge(path: &Path) -> Result<KnowledgeBase> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(KnowledgeBase::read_csv(BufReader::new(file))?)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(args: RunArgs) -> Result<()> {
    let policy: Policy = args.policy.parse()?;
    let cfg = ExperimentConfig {
        bound: args.bound,
        train_waves: args.train_waves,
        waves: args.waves,
        policy,
        seed: args.seed,
        forest: ForestConfig {
            trees: args.trees,
            vote_threshold: args.vote_threshold,
            seed: args.seed,
            scope: parse_scope(&args.scope)?,
        },
        cv_folds: args.cv_folds,
        gate: args.gate,
        force_after: args.force_after,
        lookahead: !args.plain_labels,
        parallel: args.parallel,
    };
    let scenario = load_scenario(&args, &cfg)?;
    let out = run_experiment(&scenario, &cfg)?;
    emit(&args.out, &scenario, &cfg, &out)?;
    let s = &out.summary;
    println!(
        "{} {} bound {}: confidence {:.4} savings {:.4} violations {} executions {}/{}",
        scenario.workload,
        policy,
        args.bound,
        s.final_confidence(),
        s.savings,
        s.violations,
        s.executions,
        s.sync_executions
    );
    info!("artifacts written to {}", args.out.display());
    Ok(())
}

fn generate_cmd(args: GenerateArgs) -> Result<()> {
    let scenario = generate(
        args.workload,
        &args.synthetic.config(args.workload, args.seed, args.waves),
    )?;
    let file =
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    scenario.write_stream_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let kb = read_knowledge(&args.knowledge)?;
    let model = train(kb.examples(), &args.forest.config()?)?;
    std::fs::write(&args.out, model.to_text())
        .with_context(|| format!("writing {}", args.out.display()))?;
    let fit = evaluate(&model, kb.examples())?;
    println!(
        "trained {} labels on {} examples; training accuracy {:.4} recall {:.4}",
        model.labels(),
        kb.len(),
        fit.accuracy,
        fit.recall
    );
    Ok(())
}

fn cv_cmd(args: CvArgs) -> Result<()> {
    let kb = read_knowledge(&args.knowledge)?;
    let report = cross_validate(kb.examples(), args.folds, &args.forest.config()?)?;
    write_cv_csv(&report, kb.steps(), output(args.out.as_deref())?)?;
    Ok(())
}

fn classify_cmd(args: ClassifyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.model)
        .with_context(|| format!("reading {}", args.model.display()))?;
    let mut model = ForestModel::<f64>::from_text(&text)?;
    if let Some(t) = args.vote_threshold {
        model = model.with_vote_threshold(t)?;
    }
    let kb = read_knowledge(&args.input)?;
    if kb.steps().len() != model.labels() {
        bail!(
            "model has {} labels, input has {} steps",
            model.labels(),
            kb.steps().len()
        );
    }
    let mut w = output(args.out.as_deref())?;
    let mut header = vec!["wave".to_owned()];
    header.extend(kb.steps().iter().map(|s| format!("execute_{s}")));
    writeln!(w, "{}", header.join(","))?;
    for ex in kb.examples() {
        let bits = model.classify(&ex.features)?;
        let row: Vec<String> = std::iter::once(ex.wave.to_string())
            .chain(bits.iter().map(|&b| u8::from(b).to_string()))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    let score = evaluate(&model, kb.examples())?;
    eprintln!(
        "accuracy {:.4} precision {:.4} recall {:.4}",
        score.accuracy, score.precision, score.recall
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Cv(a) => cv_cmd(a),
        Command::Classify(a) => classify_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
