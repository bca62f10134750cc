mod commands;
mod demo;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stitchkit::generate::CandidateStrategy;
use stitchkit::nn::Granularity;
use stitchkit::Error;

pub const SEED_ENV: &str = "STITCHKIT_SEED";

/// Compose new classifiers from fragments of trained networks.
#[derive(Parser, Debug)]
#[command(name = "stitchkit", version, about, long_about = None)]
pub struct Cli {
    /// Base seed. The STITCHKIT_SEED environment variable, when set, wins over this flag.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for parallel stages; 0 lets the runtime decide.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic grating dataset and split it into train/test files.
    MakeData(MakeDataArgs),
    /// Train the desk architectures on a training split.
    TrainZoo(TrainZooArgs),
    /// Write a pool manifest listing trained networks.
    BuildPool(BuildPoolArgs),
    /// Search for stitched networks and write them with their scores.
    Generate(GenerateArgs),
    /// Score saved networks or stitched networks on held-out data.
    Evaluate(EvaluateArgs),
    /// Average the predictions of the best-scoring stitched networks.
    Ensemble(EnsembleArgs),
    /// Write the CSV reports for a generation run.
    Report(ReportArgs),
    /// Run the whole pipeline end to end with default hyperparameters.
    Demo(DemoArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataShape {
    /// Number of classes.
    #[arg(long, default_value_t = 8)]
    pub classes: usize,

    /// Samples generated per class before the 80:20 split.
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,

    /// Image side length in pixels.
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    #[command(flatten)]
    pub shape: DataShape,

    /// Output directory; receives train.ds and test.ds.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    /// Training epochs (0 saves the initial weights).
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,

    /// SGD learning rate.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,

    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,

    /// Mini-batch size.
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    /// Comma-separated architectures to train.
    #[arg(long, value_delimiter = ',', default_value = "cnn_a,cnn_b,mlp_c")]
    pub archs: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainZooArgs {
    /// Training split written by make-data.
    #[arg(long, default_value = "data/train.ds")]
    pub data: PathBuf,

    /// Output directory for the trained .snet files.
    #[arg(long, default_value = "zoo")]
    pub out: PathBuf,

    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug)]
pub struct BuildPoolArgs {
    /// Directory whose .snet networks join the pool.
    #[arg(long, default_value = "zoo")]
    pub zoo: PathBuf,

    /// Explicit network files; replaces --zoo when given.
    #[arg(long, value_delimiter = ',')]
    pub networks: Vec<PathBuf>,

    /// How networks are cut: single-cut or all-spans.
    #[arg(long, default_value = "single-cut", value_parser = parse_granularity)]
    pub granularity: Granularity,

    /// Manifest path to write.
    #[arg(long, default_value = "pool.txt")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SearchOpts {
    /// K: candidates tried after each partial network.
    #[arg(short = 'K', long = "span", default_value_t = 2)]
    pub span: usize,

    /// T: a branch survives while its score stays strictly above this.
    #[arg(short = 'T', long = "threshold", default_value_t = 0.5)]
    pub threshold: f64,

    /// L: most fragments in one stitched network.
    #[arg(short = 'L', long = "max-fragments", default_value_t = 16)]
    pub max_fragments: usize,

    /// M: stitching samples drawn from the data.
    #[arg(short = 'M', long = "samples", default_value_t = 32)]
    pub samples: usize,

    /// Candidate ranking: top-cka or fewest-params.
    #[arg(long, default_value = "top-cka", value_parser = parse_strategy)]
    pub strategy: CandidateStrategy,

    /// Starting fragment or network ids (comma-separated); all when empty.
    #[arg(long, value_delimiter = ',')]
    pub start: Vec<String>,

    /// Ridge as a multiple of the mean diagonal of each joint's Gram matrix.
    #[arg(long, default_value_t = stitchkit::tensor::DEFAULT_RIDGE_SCALE)]
    pub ridge_scale: f64,

    /// Fit an intercept at each joint and fold it into the bias.
    #[arg(long)]
    pub affine: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Pool manifest written by build-pool.
    #[arg(long, default_value = "pool.txt")]
    pub pool: PathBuf,

    /// Data the stitching samples are drawn from (not the test split).
    #[arg(long, default_value = "data/train.ds")]
    pub data: PathBuf,

    /// Output directory.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,

    #[command(flatten)]
    pub search: SearchOpts,
}

#[derive(Args, Debug, Clone)]
pub struct MapOpt {
    /// Label map: `identity`, `group:N` (consecutive blocks of N classes) or
    /// explicit `src:dst` pairs such as `0:0,1:0,2:1`.
    #[arg(long, default_value = "group:4")]
    pub map: String,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Model files (.snet) to score.
    #[arg(required = true)]
    pub models: Vec<PathBuf>,

    /// Held-out split.
    #[arg(long, default_value = "data/test.ds")]
    pub data: PathBuf,

    #[command(flatten)]
    pub map: MapOpt,

    /// Also write the reports as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EnsembleOpts {
    /// Only stitched networks scoring strictly above this join the ensemble.
    #[arg(long, default_value_t = 0.8)]
    pub cka_min: f64,

    /// Largest ensemble.
    #[arg(short = 'k', long = "size", default_value_t = 10)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Generation output directory.
    #[arg(long, default_value = "results")]
    pub results: PathBuf,

    /// Held-out split.
    #[arg(long, default_value = "data/test.ds")]
    pub data: PathBuf,

    #[command(flatten)]
    pub map: MapOpt,

    #[command(flatten)]
    pub ensemble: EnsembleOpts,

    /// Also write the size sweep as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Generation output directory.
    #[arg(long, default_value = "results")]
    pub results: PathBuf,

    /// Held-out split.
    #[arg(long, default_value = "data/test.ds")]
    pub data: PathBuf,

    /// Pool manifest; its networks are evaluated alongside the stitched ones.
    #[arg(long)]
    pub pool: Option<PathBuf>,

    /// Training split for last-layer fine-tuning curves of the pool networks.
    #[arg(long, requires = "pool")]
    pub train: Option<PathBuf>,

    /// Fine-tuning samples per curve (used with --train).
    #[arg(long, default_value_t = 2560)]
    pub finetune_budget: usize,

    #[command(flatten)]
    pub map: MapOpt,

    #[command(flatten)]
    pub ensemble: EnsembleOpts,

    /// Report directory.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Working directory for every artifact.
    #[arg(long, default_value = "demo")]
    pub out: PathBuf,

    #[command(flatten)]
    pub shape: DataShape,

    #[command(flatten)]
    pub train: TrainOpts,

    #[command(flatten)]
    pub search: SearchOpts,

    #[command(flatten)]
    pub ensemble: EnsembleOpts,

    /// Classes per superclass of the evaluation subtask.
    #[arg(long, default_value_t = 4)]
    pub group: usize,

    /// Fine-tuning samples per learning curve.
    #[arg(long, default_value_t = 2560)]
    pub finetune_budget: usize,

    /// Seeds for the learning curves.
    #[arg(long, default_value_t = 5)]
    pub curve_seeds: u64,

    /// Stitching sample counts for the stitched-network learning curve.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64,128")]
    pub curve_samples: Vec<usize>,
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    Granularity::parse(s).ok_or_else(|| format!("unknown granularity '{s}'"))
}

fn parse_strategy(s: &str) -> Result<CandidateStrategy, String> {
    CandidateStrategy::parse(s).ok_or_else(|| format!("unknown strategy '{s}'"))
}

/// Failures with their exit codes: 1 usage, 2 data or format, 3 numeric.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Lib(Error::Config(_)) => 1,
            Failure::Lib(Error::Numeric(_) | Error::Diverged { .. } | Error::Degenerate(_)) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn effective_seed(flag: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        _ => Ok(flag),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = effective_seed(cli.seed)?;
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::MakeData(a) => commands::make_data(&a, seed),
        Command::TrainZoo(a) => commands::train_zoo(&a, seed),
        Command::BuildPool(a) => commands::build_pool(&a),
        Command::Generate(a) => commands::generate(&a, seed),
        Command::Evaluate(a) => commands::evaluate_cmd(&a),
        Command::Ensemble(a) => commands::ensemble(&a),
        Command::Report(a) => commands::report(&a, seed),
        Command::Demo(a) => demo::run(&a, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stitchkit: {f}");
            ExitCode::from(f.code())
        }
    }
}
