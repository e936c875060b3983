//! Human-readable summary and plot-data files assembled from a results
//! directory.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use forge_core::evaluation::TaskReport;

use crate::error::CliError;
use crate::io::{read_json, write_with};
use crate::results::*;

/// Multiplier of the baseline standard deviation in the band columns.
pub const BAND_SIGMAS: f64 = 3.0;

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

fn load<T: serde::de::DeserializeOwned>(dir: &Path, file: &str, version: impl Fn(&T) -> u32) -> Result<Option<T>, CliError> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(None);
    }
    let value: T = read_json(&path)?;
    check_version(version(&value), file)?;
    Ok(Some(value))
}

pub fn task_line(r: &TaskReport) -> String {
    let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    format!("{} ({} queries): {}", r.task, r.n_queries, metrics.join(" "))
}

pub fn backtest_table(r: &BacktestResults) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "backtest: train {}, class imbalance {}, {} permutations",
        r.train_window, r.ci, r.n_permutations
    );
    let _ = write!(s, "{:<12}", "window");
    for m in &r.methods {
        let _ = write!(s, " {:>10} {:>9}", m.method.as_str(), "perm_p95");
    }
    let _ = writeln!(s);
    for (i, w) in r.test_windows.iter().enumerate() {
        let _ = write!(s, "{:<12}", w.to_string());
        for m in &r.methods {
            let win = &m.windows[i];
            let auc = win.auc_roc.map_or_else(|| "skipped".to_string(), |a| format!("{a:.4}"));
            let _ = write!(s, " {auc:>10} {:>9}", opt(win.permutation_p95, 4));
        }
        let _ = writeln!(s);
    }
    let band = |year: i32| r.series.baseline.iter().find(|b| b.year == year);
    let _ = writeln!(
        s,
        "{} series (x = {}, smoothing {}), baseline from {} never-combined pairs:",
        r.series.method, r.series.x_percent, r.series.window_smoothing, r.series.population_size
    );
    for p in &r.series.pairs {
        let first_above = p
            .points
            .iter()
            .find(|pt| match (pt.smoothed, band(pt.year)) {
                (Some(v), Some(b)) => v > b.mean + BAND_SIGMAS * b.std,
                _ => false,
            })
            .map(|pt| pt.year);
        let planted = p.planted_year.map(|y| format!(", planted {y}")).unwrap_or_default();
        let above = first_above.map_or_else(|| "never".to_string(), |y| y.to_string());
        let _ = writeln!(s, "  {} {}{planted}: first above band {above}", p.code_a, p.code_b);
    }
    s.trim_end().to_string()
}

fn write_plots(dir: &Path, backtest: &BacktestResults) -> Result<(), CliError> {
    let plots = dir.join("plots");
    let auc_path = plots.join("auc_vs_window.csv");
    let io = |p: &Path, e: std::io::Error| CliError::io(p, e);
    write_with(&auc_path, |w| {
        writeln!(w, "method,window,auc_roc,permutation_mean,permutation_p95,universe_size,k,n_positives,skipped")
            .map_err(|e| io(&auc_path, e))?;
        for m in &backtest.methods {
            for win in &m.windows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    m.method,
                    win.window,
                    opt(win.auc_roc, 6),
                    opt(win.permutation_mean, 6),
                    opt(win.permutation_p95, 6),
                    win.universe_size,
                    win.k,
                    win.positives.len(),
                    win.skipped.as_deref().unwrap_or("")
                )
                .map_err(|e| io(&auc_path, e))?;
            }
        }
        Ok(())
    })?;

    let series = &backtest.series;
    let band_cols = |year: i32| -> [String; 3] {
        match series.baseline.iter().find(|b| b.year == year) {
            Some(b) => [
                format!("{:.9}", b.mean),
                format!("{:.9}", b.mean - BAND_SIGMAS * b.std),
                format!("{:.9}", b.mean + BAND_SIGMAS * b.std),
            ],
            None => Default::default(),
        }
    };
    let cs_path = plots.join("cs_vs_year.csv");
    write_with(&cs_path, |w| {
        writeln!(
            w,
            "method,code_a,code_b,planted_year,year,cs,cs_smoothed,baseline_mean,baseline_minus_3sd,baseline_plus_3sd"
        )
        .map_err(|e| io(&cs_path, e))?;
        for p in &series.pairs {
            for pt in &p.points {
                let [mean, lo, hi] = band_cols(pt.year);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{mean},{lo},{hi}",
                    series.method,
                    p.code_a,
                    p.code_b,
                    p.planted_year.map(|y| y.to_string()).unwrap_or_default(),
                    pt.year,
                    opt(pt.cs, 9),
                    opt(pt.smoothed, 9)
                )
                .map_err(|e| io(&cs_path, e))?;
            }
        }
        Ok(())
    })?;

    let band_path = plots.join("baseline_band.csv");
    write_with(&band_path, |w| {
        writeln!(w, "method,year,n,baseline_mean,baseline_std,baseline_minus_3sd,baseline_plus_3sd")
            .map_err(|e| io(&band_path, e))?;
        for b in &series.baseline {
            let [mean, lo, hi] = band_cols(b.year);
            writeln!(w, "{},{},{},{mean},{:.9},{lo},{hi}", series.method, b.year, b.n, b.std)
                .map_err(|e| io(&band_path, e))?;
        }
        Ok(())
    })
}

/// Prints what the results directory holds and writes `plots/*.csv` when
/// backtest results are present.
pub fn report(dir: &Path) -> Result<String, CliError> {
    let train: Option<TrainResults> = load(dir, TRAIN_FILE, |r: &TrainResults| r.schema_version)?;
    let backtest: Option<BacktestResults> = load(dir, BACKTEST_FILE, |r: &BacktestResults| r.schema_version)?;
    let tasks: Option<TasksResults> = load(dir, TASKS_FILE, |r: &TasksResults| r.schema_version)?;
    if train.is_none() && backtest.is_none() && tasks.is_none() {
        return Err(CliError::MissingResults(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    if let Some(t) = &train {
        out.push(format!(
            "training: {} patents, vocabulary {}, {} steps, loss {:.4} -> {:.4} (ratio {:.3})",
            t.n_patents,
            t.vocab_size,
            t.steps,
            t.initial_loss,
            t.final_loss,
            t.final_loss / t.initial_loss
        ));
    }
    if let Some(b) = &backtest {
        out.push(backtest_table(b));
        write_plots(dir, b)?;
    }
    if let Some(t) = &tasks {
        out.push("tasks:".to_string());
        out.extend(t.tasks.values().map(|r| format!("  {}", task_line(r))));
    }
    Ok(out.join("\n"))
}
