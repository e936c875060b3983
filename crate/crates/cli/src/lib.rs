//! The `forge` command line: stage commands, the end-to-end pipeline and
//! reports. Exit codes are 0 on success, 2 for configuration errors, 3 for
//! data errors and 4 for runtime failures.

pub mod args;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod report;
pub mod results;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use forge_core::evaluation::TaskConfig;
use forge_core::{CSConfig, SyntheticSpec};

use args::{Cli, Command, StageArg, TaskArg};
pub use config::ExperimentConfig;
pub use error::{CliError, EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME};
use stages::{PipelineStage, TaskKind};

/// Environment variable capping the worker threads of parallel stages.
pub const THREADS_ENV: &str = "FORGE_THREADS";

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn load_optional(path: Option<&PathBuf>) -> Result<ExperimentConfig, CliError> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), |p| ExperimentConfig::load(p))
}

fn dispatch(command: Command) -> Result<String, CliError> {
    match command {
        Command::Ingest(a) => stages::ingest(&a.input, &a.output, a.min_year, a.max_year),
        Command::Synth(a) => {
            let mut spec: SyntheticSpec = match &a.spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| CliError::Config(format!("cannot read spec {}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            spec.validate()?;
            stages::synth(&spec, &a.out)
        }
        Command::Train(a) => {
            let mut cfg = load_optional(a.config.as_ref())?;
            cfg.corpus = Some(a.corpus.clone());
            cfg.synthetic = None;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.steps {
                cfg.train.steps = n;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = lr;
            }
            let cfg = cfg.effective()?;
            stages::train_model(&a.corpus, &cfg, &a.out)
        }
        Command::Embed(a) => stages::embed(&a.ckpt, &a.corpus, a.window, &a.out, a.yearly, a.cls_text),
        Command::Cs(a) => {
            let cfg = CSConfig {
                method: a.method,
                x_percent: a.x,
                window_smoothing: a.smooth,
            };
            stages::cs(&a.store_dir, &a.pairs, cfg, &a.out)
        }
        Command::Score(a) => stages::score(&a.corpus, a.train_window, a.test_window, a.ci, a.min_support, &a.out),
        Command::Backtest(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(c) = a.corpus {
                cfg.corpus = Some(c);
                cfg.synthetic = None;
            }
            if let Some(d) = a.output_dir {
                cfg.output_dir = d;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(ci) = a.ci {
                cfg.backtest.ci = ci;
            }
            if let Some(n) = a.n_permutations {
                cfg.backtest.n_permutations = n;
            }
            let cfg = cfg.effective()?;
            let ckpt = a.ckpt.unwrap_or_else(|| cfg.checkpoint_path());
            stages::backtest(&cfg, &cfg.corpus_path(), &ckpt)
        }
        Command::Tasks(a) => {
            let mut tasks: TaskConfig = match &a.config {
                Some(p) => ExperimentConfig::load(p)?.tasks,
                None => TaskConfig::default(),
            };
            if let Some(n) = a.max_queries {
                tasks.max_queries = n;
            }
            if let Some(s) = a.seed {
                tasks.seed = s;
            }
            let kinds = match a.task {
                TaskArg::Ipc => vec![TaskKind::Ipc],
                TaskArg::Cite => vec![TaskKind::Cite],
                TaskArg::Title => vec![TaskKind::Title],
                TaskArg::All => TaskKind::ALL.to_vec(),
            };
            let out = a.out.unwrap_or_else(|| {
                a.ckpt
                    .parent()
                    .map_or_else(|| PathBuf::from(results::TASKS_FILE), |d| d.join(results::TASKS_FILE))
            });
            stages::tasks(&kinds, &a.ckpt, &a.corpus, a.store.as_deref(), &tasks, &out)
        }
        Command::Report(a) => report::report(&a.results),
        Command::Run(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(d) = a.output_dir {
                cfg.output_dir = d;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.steps {
                cfg.train.steps = n;
            }
            let stages: Vec<PipelineStage> = match a.stages {
                None => PipelineStage::ALL.to_vec(),
                Some(list) => list
                    .into_iter()
                    .map(|s| match s {
                        StageArg::Synth => PipelineStage::Synth,
                        StageArg::Train => PipelineStage::Train,
                        StageArg::Backtest => PipelineStage::Backtest,
                        StageArg::Tasks => PipelineStage::Tasks,
                        StageArg::Report => PipelineStage::Report,
                    })
                    .collect(),
            };
            Ok(stages::run_pipeline(cfg, &stages)?.join("\n"))
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Output goes to stdout, diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let result = thread_cap().and_then(|cap| match cap {
        None => dispatch(cli.command),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(|| dispatch(cli.command)),
    });
    match result {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
