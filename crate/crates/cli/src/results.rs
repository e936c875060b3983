//! Machine-readable result files. Every file carries `schema_version`;
//! readers reject versions they do not know.

use std::collections::BTreeMap;

use forge_core::evaluation::{TaskReport, WindowResult};
use forge_core::{CsMethod, TechCode, TimeWindow};
use serde::{Deserialize, Serialize};

use crate::config::{window_str, windows_str};
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub const TRAIN_FILE: &str = "train.json";
pub const BACKTEST_FILE: &str = "backtest.json";
pub const TASKS_FILE: &str = "tasks.json";

/// Steps averaged for the reported final loss.
pub const FINAL_LOSS_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResults {
    pub schema_version: u32,
    pub corpus_sha256: String,
    pub model_sha256: String,
    pub n_patents: usize,
    pub vocab_size: usize,
    pub steps: usize,
    pub skipped_batches: usize,
    /// Loss of the first step.
    pub initial_loss: f64,
    /// Mean loss of the last [`FINAL_LOSS_STEPS`] steps.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub method: CsMethod,
    pub n_candidates: usize,
    pub n_scored: usize,
    pub windows: Vec<WindowResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub year: i32,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YearPoint {
    pub year: i32,
    pub cs: Option<f64>,
    pub n_pairs_used: Option<usize>,
    pub smoothed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSeries {
    pub code_a: TechCode,
    pub code_b: TechCode,
    /// First co-occurrence year when known from synthetic ground truth.
    pub planted_year: Option<i32>,
    pub points: Vec<YearPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesResults {
    pub method: CsMethod,
    pub x_percent: f64,
    pub window_smoothing: usize,
    /// Never-combined pairs the baseline sample is drawn from.
    pub population_size: usize,
    pub baseline: Vec<BandPoint>,
    pub pairs: Vec<PairSeries>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestResults {
    pub schema_version: u32,
    pub corpus_sha256: String,
    pub model_sha256: String,
    #[serde(with = "window_str")]
    pub train_window: TimeWindow,
    #[serde(with = "windows_str")]
    pub test_windows: Vec<TimeWindow>,
    pub ci: f64,
    pub min_support: usize,
    pub n_permutations: usize,
    pub seed: u64,
    pub methods: Vec<MethodResults>,
    pub series: SeriesResults,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TasksResults {
    pub schema_version: u32,
    pub corpus_sha256: String,
    pub model_sha256: String,
    /// Keyed by task name so separate runs merge deterministically.
    pub tasks: BTreeMap<String, TaskReport>,
}

pub fn check_version(found: u32, file: &str) -> Result<(), CliError> {
    if found != SCHEMA_VERSION {
        return Err(CliError::Data(format!(
            "{file} has schema version {found}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}
