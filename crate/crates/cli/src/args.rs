use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forge_core::model::ClsText;
use forge_core::{CsMethod, TimeWindow};

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Forecast technology combinations from patent language")]
pub struct Cli {
    /// Log progress; repeat for debug output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a raw corpus and write it in canonical order.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus with planted converging code pairs.
    Synth(SynthArgs),
    /// Train the encoder on a corpus.
    Train(TrainArgs),
    /// Extract technology and document embeddings for a time window.
    Embed(EmbedArgs),
    /// Context similarity of code pairs from embedding stores.
    Cs(CsArgs),
    /// Null-model statistics and innovation labels for candidate pairs.
    Score(ScoreArgs),
    /// Backtest context similarity as a forecaster of new combinations.
    Backtest(BacktestArgs),
    /// Downstream patent tasks: code prediction, citations, title matching.
    Tasks(TasksArgs),
    /// Summarise a results directory and write plot data.
    Report(ReportArgs),
    /// Run the configured pipeline end to end.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Line-delimited JSON corpus.
    #[arg(long)]
    pub input: PathBuf,
    /// Canonical corpus written here.
    #[arg(long)]
    pub output: PathBuf,
    /// Drop patents published before this year.
    #[arg(long)]
    pub min_year: Option<i32>,
    /// Drop patents published after this year.
    #[arg(long)]
    pub max_year: Option<i32>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML generator specification; defaults apply to missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Corpus path; ground truth goes to `<out>.truth.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Experiment config supplying [tokenizer], [model] and [train].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; train.json and loss.csv are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Global seed for initialisation, shuffling and masking.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// `Y1:Y2` or a single year.
    #[arg(long)]
    pub window: TimeWindow,
    /// Store file, or directory with `--yearly`.
    #[arg(long)]
    pub out: PathBuf,
    /// Write one store per year of the window.
    #[arg(long)]
    pub yearly: bool,
    /// Text behind the `[CLS]` vectors: title_and_abstract or abstract_only.
    #[arg(long, default_value = "title_and_abstract")]
    pub cls_text: ClsText,
}

#[derive(Debug, Args)]
pub struct CsArgs {
    /// Directory of `.tte` embedding stores.
    #[arg(long)]
    pub store_dir: PathBuf,
    /// CSV of `code_a,code_b`, or `all-candidates` for every pair never
    /// combined in the stores.
    #[arg(long)]
    pub pairs: String,
    #[arg(long, default_value = "topx_tech")]
    pub method: CsMethod,
    /// Fraction of cross pairs averaged by `topx_tech`.
    #[arg(long, default_value_t = 0.01)]
    pub x: f64,
    /// Centred smoothing width in years.
    #[arg(long, default_value_t = 3)]
    pub smooth: usize,
    /// CS table; smoothed yearly series go to `<out stem>.smoothed.csv`.
    #[arg(long, default_value = "cs.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub train_window: TimeWindow,
    #[arg(long)]
    pub test_window: TimeWindow,
    /// Fraction of candidates labelled positive.
    #[arg(long)]
    pub ci: f64,
    #[arg(long, default_value_t = 1)]
    pub min_support: usize,
    #[arg(long, default_value = "pair_stats.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `model.ttk` in the output directory.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Overrides the corpus of the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ci: Option<f64>,
    #[arg(long)]
    pub n_permutations: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Ipc,
    Cite,
    Title,
    All,
}

#[derive(Debug, Args)]
pub struct TasksArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Reference store for the kNN code-prediction baseline.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Experiment config supplying [tasks].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to `tasks.json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_queries: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Synth,
    Train,
    Backtest,
    Tasks,
    Report,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides train.steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Comma-separated subset of stages; all by default.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub stages: Option<Vec<StageArg>>,
}
