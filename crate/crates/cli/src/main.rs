use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use predopt::evaluation::{
    load_predictor, read_records_csv, run_experiment, EvalError, ExperimentConfig, ExperimentReport,
};
use predopt::heuristics::{adaptive_fixing, relax_and_fix};
use predopt::instances::{Family, GenConfig, Instance, InstanceError};
use predopt::milp::build_model;
use predopt::pipeline::{
    build_dataset, itemwise_predict, predopt_solve, read_dataset, train_predictor, write_dataset, NeuralPredictor,
    OraclePredictor, PipelineError, PredOptConfig, Predictor, RandomPredictor, TrainSettings,
};
use predopt::solver::{BundledSolver, MipSolver, SolverError, SolverOptions};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Config { path: PathBuf, detail: String },
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "predopt", version, about = "Learning-guided variable fixing for sequential MILPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate instance files or a solved training set.
    Gen(GenArgs),
    /// Solve one instance exactly or with the family heuristic.
    Solve(SolveArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Predict and run PredOpt on one instance.
    Predict(PredictArgs),
    /// Run an experiment over a generated test set.
    Eval(EvalArgs),
    /// Re-aggregate experiment outputs into a table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Mclsp,
    Msmk,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Mclsp => Family::Mclsp,
            FamilyArg::Msmk => Family::Msmk,
        }
    }
}

#[derive(Args)]
struct GeneratorArgs {
    #[arg(long, value_enum, default_value = "mclsp")]
    family: FamilyArg,
    #[arg(long, default_value_t = 2)]
    items: usize,
    #[arg(long, default_value_t = 10)]
    periods: usize,
    /// Knapsack resources J.
    #[arg(long, default_value_t = 5)]
    resources: usize,
    /// Lot-sizing capacity ratio c.
    #[arg(long, default_value_t = 10.0)]
    cap_ratio: f64,
    #[arg(long, default_value_t = 1000.0)]
    setup_to_hold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl GeneratorArgs {
    fn config(&self) -> GenConfig {
        let mut g = match self.family {
            FamilyArg::Mclsp => GenConfig::mclsp(self.seed, self.items, self.periods, self.cap_ratio),
            FamilyArg::Msmk => GenConfig::msmk(self.seed, self.items, self.periods, self.resources),
        };
        g.setup_to_hold = self.setup_to_hold;
        g
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    generator: GeneratorArgs,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Directory for instance JSON files.
    #[arg(long, required_unless_present = "dataset")]
    out: Option<PathBuf>,
    /// Solve every instance and write a JSON-lines training set here instead.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    eta: f64,
    /// Per-instance time limit for labelling solves, in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Experiment file; its `dataset` section replaces the generator flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    instance: PathBuf,
    #[arg(long)]
    time_limit: Option<f64>,
    /// Write the incumbent trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run relax-and-fix or adaptive fixing instead of the exact solver.
    #[arg(long)]
    heuristic: bool,
    /// Write the model in LP format.
    #[arg(long)]
    lp: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment file; its `train` section is the base that flags override.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    instance: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Only print the prediction probabilities.
    #[arg(long)]
    probs: bool,
    /// Predict through item subsets of the model's size.
    #[arg(long)]
    itemwise: bool,
    #[arg(long, default_value_t = 10)]
    delta: usize,
    #[arg(long)]
    init_level: Option<f64>,
    #[arg(long)]
    time_limit: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Neural,
    Oracle,
    Random,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment file (an `eval` section or a bare experiment config).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "neural")]
    predictor: PredictorArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment output directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetSection {
    generator: GenConfig,
    count: usize,
    #[serde(default = "default_eta")]
    eta: f64,
    #[serde(default)]
    solver: SolverOptions,
}

fn default_eta() -> f64 {
    0.95
}

/// Single experiment file with one optional section per stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ExperimentFile {
    dataset: Option<DatasetSection>,
    train: Option<TrainSettings>,
    eval: Option<ExperimentConfig>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.into(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::File {
        path: path.into(),
        source,
    })
}

fn load_file(path: &Path) -> Result<ExperimentFile> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Config {
        path: path.into(),
        detail: e.to_string(),
    })
}

fn missing(path: &Path, section: &str) -> CliError {
    CliError::Config {
        path: path.into(),
        detail: format!("no `{section}` section"),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn gen(args: GenArgs) -> Result<()> {
    let (generator, count, eta, solver_opts) = match &args.config {
        Some(path) => {
            let d = load_file(path)?.dataset.ok_or_else(|| missing(path, "dataset"))?;
            (d.generator, d.count, d.eta, d.solver)
        }
        None => {
            let mut opts = SolverOptions::default();
            opts.time_limit = args.time_limit;
            (args.generator.config(), args.count, args.eta, opts)
        }
    };
    if let Some(path) = &args.dataset {
        let data = build_dataset(&generator, count, eta, &BundledSolver, &solver_opts)?;
        write_dataset(&data, path)?;
        eprintln!(
            "wrote {} records to {} ({} skipped)",
            data.records.len(),
            path.display(),
            data.header.skipped
        );
        return Ok(());
    }
    let dir = args.out.as_ref().ok_or_else(|| CliError::Usage("--out or --dataset is required".into()))?;
    fs::create_dir_all(dir).map_err(|source| CliError::File {
        path: dir.clone(),
        source,
    })?;
    for k in 0..count as u64 {
        let seed = generator.seed + k;
        let inst = generator.with_seed(seed).generate()?;
        let path = dir.join(format!("{}-{seed}.json", inst.family()));
        inst.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn solve(args: SolveArgs) -> Result<()> {
    let inst = Instance::load(&args.instance)?;
    let mut opts = SolverOptions::default();
    opts.time_limit = args.time_limit;
    let model = build_model(&inst);
    if let Some(path) = &args.lp {
        write_text(path, &model.to_lp_string())?;
    }
    if args.heuristic {
        let r = match &inst {
            Instance::Mclsp(m) => relax_and_fix(m, &BundledSolver, &opts)?,
            Instance::Msmk(k) => adaptive_fixing(k, &BundledSolver, &opts)?,
        };
        print_json(&r);
        return Ok(());
    }
    let r = BundledSolver.solve(&model, &opts)?;
    if let Some(path) = &args.trace {
        let file = fs::File::create(path).map_err(|source| CliError::File {
            path: path.clone(),
            source,
        })?;
        r.write_trace_csv(std::io::BufWriter::new(file)).map_err(|source| CliError::File {
            path: path.clone(),
            source,
        })?;
    }
    print_json(&r);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut settings = match &args.config {
        Some(path) => load_file(path)?.train.ok_or_else(|| missing(path, "train"))?,
        None => TrainSettings::default(),
    };
    if let Some(v) = args.epochs {
        settings.options.epochs = v;
    }
    if let Some(v) = args.batch_size {
        settings.options.batch_size = v;
    }
    if let Some(v) = args.seed {
        settings.options.seed = v;
        settings.init_seed = v;
    }
    if let Some(v) = args.hidden {
        settings.encoder_hidden = v;
    }
    if let Some(v) = args.window {
        settings.window = v;
    }
    if args.lr.is_some() {
        settings.lr = args.lr;
    }
    let data = read_dataset(&args.dataset)?;
    eprintln!("training on {} sequences", data.records.len());
    let (predictor, _) = train_predictor(&data, &settings, |epoch, loss| {
        eprintln!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    })?;
    predictor.save(&args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let inst = Instance::load(&args.instance)?;
    let neural = NeuralPredictor::load(&args.checkpoint)?;
    let itemwise;
    let predictor: &dyn Predictor = if args.itemwise {
        itemwise = predopt::pipeline::ItemwisePredictor {
            inner: &neural,
            sub_items: neural.meta.items,
            delta: args.delta,
            seed: 0,
        };
        &itemwise
    } else {
        neural.check_dims(&inst)?;
        &neural
    };
    if args.probs {
        if args.itemwise {
            print_json(&itemwise_predict(&neural, &inst, neural.meta.items, args.delta, 0)?);
        } else {
            print_json(&predictor.predict(&inst)?);
        }
        return Ok(());
    }
    let mut config = PredOptConfig::for_family(inst.family());
    config.eta = neural.meta.eta;
    if let Some(v) = args.init_level {
        config.init_level = v;
    }
    config.resolve.time_limit = args.time_limit;
    print_json(&predopt_solve(&inst, predictor, &config, &BundledSolver)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let text = read_text(&args.config)?;
    let bad = |e: serde_json::Error| CliError::Config {
        path: args.config.clone(),
        detail: e.to_string(),
    };
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    let section = value.get_mut("eval").map(serde_json::Value::take).unwrap_or(value);
    let config: ExperimentConfig = serde_json::from_value(section).map_err(bad)?;
    let eta = config.predopt_config().eta;
    let out = match args.predictor {
        PredictorArg::Neural => {
            let p = load_predictor(&config)?;
            run_experiment(&config, &p, "neural", &BundledSolver)?
        }
        PredictorArg::Oracle => {
            let p = OraclePredictor {
                solver: BundledSolver,
                options: config.baseline.clone(),
                eta,
            };
            run_experiment(&config, &p, "oracle", &BundledSolver)?
        }
        PredictorArg::Random => run_experiment(&config, &RandomPredictor { seed: config.generator.seed }, "random", &BundledSolver)?,
    };
    out.write_to(&args.out)?;
    print!("{}", out.report.to_text());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut columns = Vec::new();
    for dir in &args.dirs {
        let stored: ExperimentReport =
            serde_json::from_str(&read_text(&dir.join("report.json"))?).map_err(|e| CliError::Config {
                path: dir.join("report.json"),
                detail: e.to_string(),
            })?;
        let csv_path = dir.join("instances.csv");
        let file = fs::File::open(&csv_path).map_err(|source| CliError::File {
            path: csv_path.clone(),
            source,
        })?;
        let records = read_records_csv(file)?;
        let again = ExperimentReport::from_records(stored.provenance.clone(), &records, stored.baseline_status.clone())?;
        if again != stored {
            eprintln!("warning: {} disagrees with its instances.csv", dir.join("report.json").display());
        }
        columns.push(again);
    }
    let labels: Vec<String> = columns[0].rows().into_iter().map(|(l, _)| l).collect();
    let values: Vec<Vec<String>> = columns
        .iter()
        .map(|c| c.rows().into_iter().map(|(_, v)| v).collect())
        .collect();
    let names: Vec<&str> = columns.iter().map(|c| c.provenance.name.as_str()).collect();
    if args.csv {
        println!("metric,{}", names.join(","));
        for (r, label) in labels.iter().enumerate() {
            let row: Vec<&str> = values.iter().map(|v| v[r].as_str()).collect();
            println!("{label},{}", row.join(","));
        }
        return Ok(());
    }
    let lw = labels.iter().map(String::len).max().unwrap_or(0);
    let cw = names
        .iter()
        .map(|n| n.len())
        .chain(values.iter().flatten().map(String::len))
        .max()
        .unwrap_or(0);
    let mut line = format!("{:<lw$}", "");
    for n in &names {
        line.push_str(&format!("  {n:>cw$}"));
    }
    println!("{line}");
    for (r, label) in labels.iter().enumerate() {
        let mut line = format!("{label:<lw$}");
        for v in &values {
            line.push_str(&format!("  {:>cw$}", v[r]));
        }
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Solve(a) => solve(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
