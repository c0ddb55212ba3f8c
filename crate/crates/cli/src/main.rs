use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use latefuse::data::read_dataset_csv;
use latefuse::federation::{run_pipeline, Method, PipelineConfig, PipelineOutput};
use latefuse::moments::BandwidthPolicy;
use latefuse::nuisance_fusion::GridPrediction;
use latefuse::sim::{run_experiment, write_experiment, ScenarioConfig};
use latefuse::{Error, ModelKind};

#[derive(Parser, Debug)]
#[command(name = "latefuse", version, about = "Late-fusion multi-task learning for semiparametric models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one of the built-in scenarios and score each method.
    Sim(SimArgs),
    /// Fit a model to one CSV per task.
    Fit(FitArgs),
}

#[derive(clap::Args, Debug, Serialize)]
struct SimArgs {
    #[arg(long)]
    scenario: u8,
    /// Samples per task.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    eta: f64,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "itl,mtl,mtl-nuis")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, default_value_t = 8)]
    p: usize,
    /// Comma-separated ascending λ values; default grid if omitted.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Off-grid evaluation of fused nuisances: auto, nearest or local-shift.
    #[arg(long, default_value = "auto")]
    grid_prediction: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug, Serialize)]
struct FitArgs {
    /// plm, sim or cate-sim.
    #[arg(long)]
    model: String,
    /// Comma-separated CSV files, one per task (columns x1..xp[,t],y).
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value = "mtl")]
    method: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Off-grid evaluation of fused nuisances: auto, nearest or local-shift.
    #[arg(long, default_value = "auto")]
    grid_prediction: String,
    /// Fixed kernel bandwidth; cross-validated if omitted.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else {
        3
    }
}

fn parse_prediction(s: &str) -> Result<GridPrediction, Error> {
    match s {
        "auto" => Ok(GridPrediction::Auto),
        "nearest" => Ok(GridPrediction::Nearest),
        "local-shift" | "local_shift" => Ok(GridPrediction::LocalShift),
        other => Err(Error::InvalidConfig(format!("unknown grid prediction `{other}`"))),
    }
}

fn run_sim(args: &SimArgs) -> Result<(), Error> {
    let mut cfg = ScenarioConfig::new(args.scenario, args.n, args.eta);
    cfg.repeats = args.repeats;
    cfg.seed = args.seed;
    cfg.methods = args.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?;
    cfg.folds = args.folds;
    cfg.tasks = args.tasks;
    cfg.p = args.p;
    cfg.lambda_grid = args.lambda_grid.clone();
    cfg.grid_prediction = parse_prediction(&args.grid_prediction)?;
    cfg.validate()?;
    let result = run_experiment(&cfg)?;
    write_experiment(&result, &args.out)?;
    for row in result.summary.iter().filter(|r| r.metric == "avg_mse" || r.metric == "max_mse") {
        println!("{:<9} {:<8} mean {:.6e}  se {:.3e}  ({} repeats)", row.method, row.metric, row.mean, row.se, row.repeats);
    }
    if !result.failures.is_empty() {
        eprintln!("{} run(s) failed; see failures.csv", result.failures.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct FitEcho<'a> {
    args: &'a FitArgs,
    pipeline: &'a PipelineConfig,
}

#[derive(Serialize)]
struct EstimateRow<'a> {
    task: usize,
    file: &'a str,
    method: Method,
    coordinate: usize,
    estimate: f64,
    initial: f64,
    lambda: f64,
}

#[derive(Serialize)]
struct LambdaRow {
    lambda: f64,
    cv_loss: f64,
    selected: bool,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Error> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

fn write_fit(args: &FitArgs, config: &PipelineConfig, out: &PipelineOutput) -> Result<(), Error> {
    fs::create_dir_all(&args.out)?;
    let mut w = csv_writer(&args.out.join("results.csv"))?;
    for (k, (est, init)) in out.estimates.iter().zip(&out.initial).enumerate() {
        let file = args.data[k].to_string_lossy();
        for (c, (e, i)) in est.theta.iter().zip(&init.theta).enumerate() {
            w.serialize(EstimateRow {
                task: k + 1,
                file: &file,
                method: out.method,
                coordinate: c + 1,
                estimate: *e,
                initial: *i,
                lambda: out.lambda,
            })?;
        }
    }
    w.flush()?;
    let mut w = csv_writer(&args.out.join("summary.csv"))?;
    match &out.lambda_selection {
        Some(sel) => {
            for (l, loss) in sel.grid.iter().zip(&sel.losses) {
                w.serialize(LambdaRow { lambda: *l, cv_loss: *loss, selected: *l == sel.lambda })?;
            }
        }
        None => w.serialize(LambdaRow { lambda: out.lambda, cv_loss: f64::NAN, selected: true })?,
    }
    w.flush()?;
    out.audit.write_jsonl(args.out.join("audit.jsonl"))?;
    let echo = serde_json::to_string_pretty(&FitEcho { args, pipeline: config })?;
    fs::write(args.out.join("config.json"), echo + "\n")?;
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<(), Error> {
    let kind: ModelKind = args.model.parse()?;
    let method: Method = args.method.parse()?;
    let datasets = args.data.iter().enumerate().map(|(k, p)| read_dataset_csv(p, k)).collect::<Result<Vec<_>, _>>()?;
    let mut config = PipelineConfig::new(kind, method);
    config.folds = args.folds;
    config.seed = args.seed;
    config.lambda_grid = args.lambda_grid.clone();
    config.grid_prediction = parse_prediction(&args.grid_prediction)?;
    if let Some(h) = args.bandwidth {
        if !(h > 0.0) {
            return Err(Error::InvalidConfig(format!("bandwidth {h} must be positive")));
        }
        config.bandwidth = BandwidthPolicy::Fixed(h);
    }
    let out = run_pipeline(&datasets, &config)?;
    write_fit(args, &config, &out)?;
    for (k, est) in out.estimates.iter().enumerate() {
        let theta: Vec<String> = est.theta.iter().map(|v| format!("{v:.6}")).collect();
        println!("task {}: θ = [{}]", k + 1, theta.join(", "));
    }
    println!("λ = {:.6e}", out.lambda);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sim(a) => run_sim(a),
        Command::Fit(a) => run_fit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
