//! CSV telemetry, summaries and text reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use blockpd::diagnostics::{descent_monitor, fit_records, RateModel};
use blockpd::solvers::IterationRecord;

use crate::config::RegimeTag;
use crate::CliError;

pub const RUN_COLUMNS: [&str; 12] = [
    "iter",
    "objective",
    "dist2_plain",
    "dist2_weighted",
    "kappa_margin",
    "omega_bar",
    "min_tau",
    "max_tau",
    "min_sigma",
    "max_sigma",
    "n_sampled_primal",
    "n_sampled_dual",
];

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "iter",
    "n_seeds",
    "objective_mean",
    "objective_stderr",
    "dist2_plain_mean",
    "dist2_plain_stderr",
    "dist2_weighted_mean",
    "dist2_weighted_stderr",
];

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn timestamp() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_csv(path: &Path, header: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut file = std::fs::File::create(path).map_err(io(path))?;
    writeln!(file, "# {header} generated_unix={}", timestamp()).map_err(io(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(columns).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn run_row(r: &IterationRecord) -> Vec<String> {
    vec![
        r.iteration.to_string(),
        num(r.objective),
        opt(r.dist2_plain),
        opt(r.dist2_weighted),
        opt(r.kappa_margin),
        num(r.omega_bar),
        num(r.min_tau),
        num(r.max_tau),
        num(r.min_sigma),
        num(r.max_sigma),
        r.sampled_primal.len().to_string(),
        r.sampled_dual.len().to_string(),
    ]
}

pub fn write_run_csv(path: &Path, label: &str, seed: u64, records: &[IterationRecord]) -> Result<(), CliError> {
    let rows: Vec<_> = records.iter().map(run_row).collect();
    write_csv(path, &format!("blockpd run label={label} seed={seed}"), &RUN_COLUMNS, &rows)
}

/// Reads back the numeric columns of a run CSV (`None` for empty cells).
pub fn read_run_csv(path: &Path) -> Result<Vec<Vec<Option<f64>>>, CliError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let row = rec
            .iter()
            .map(|s| if s.is_empty() { Ok(None) } else { s.parse::<f64>().map(Some) })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        out.push(row);
    }
    Ok(out)
}

/// Sample mean and standard error of the mean (empty with fewer than two values).
pub fn mean_stderr(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    if v.len() < 2 {
        return (Some(mean), None);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (Some(mean), Some((var / k).sqrt()))
}

/// Per-iteration mean and standard error across seeds of objective,
/// `dist2_plain` and `dist2_weighted`, from the per-seed CSV rows.
pub fn summary_rows(runs: &[Vec<Vec<Option<f64>>>]) -> Vec<Vec<String>> {
    // column indices in RUN_COLUMNS
    const COLS: [usize; 3] = [1, 2, 3];
    let mut by_iter: BTreeMap<u64, Vec<&Vec<Option<f64>>>> = BTreeMap::new();
    for run in runs {
        for row in run {
            if let Some(Some(it)) = row.first() {
                by_iter.entry(*it as u64).or_default().push(row);
            }
        }
    }
    by_iter
        .into_iter()
        .map(|(it, rows)| {
            let mut out = vec![it.to_string(), rows.len().to_string()];
            for c in COLS {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(c).copied().flatten()).collect();
                let (m, s) = mean_stderr(&vals);
                out.push(opt(m));
                out.push(opt(s));
            }
            out
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, label: &str, rows: &[Vec<String>], notes: &[String]) -> Result<(), CliError> {
    let mut header = format!("blockpd summary label={label}");
    for n in notes {
        header.push_str("\n# ");
        header.push_str(n);
    }
    write_csv(path, &header, &SUMMARY_COLUMNS, rows)
}

/// Rate models reported for a regime.
pub fn rate_models(regime: RegimeTag) -> Vec<RateModel> {
    match regime {
        RegimeTag::Acc2 | RegimeTag::Acc => vec![RateModel::Power],
        RegimeTag::Lin => vec![RateModel::Exponential],
        RegimeTag::Fixed => vec![RateModel::Power, RateModel::Exponential],
    }
}

/// One-line description of a rate fit of `dist2_plain`.
pub fn rate_line(records: &[IterationRecord], window: (usize, usize), model: RateModel, omega: f64) -> String {
    match fit_records(records, |r| r.dist2_plain, window.0, window.1, model) {
        Ok(f) => match model {
            RateModel::Power => format!(
                "power fit on [{}, {}]: slope {:.4}, r^2 {:.4}",
                f.window.0, f.window.1, f.slope, f.r_squared
            ),
            RateModel::Exponential => format!(
                "exponential fit on [{}, {}]: factor {:.6} per iteration (frozen omega {:.6}), r^2 {:.4}",
                f.window.0,
                f.window.1,
                f.slope.exp(),
                omega,
                f.r_squared
            ),
        },
        Err(e) => format!("{model:?} fit unavailable: {e}"),
    }
}

/// Verdict of the weighted-distance monitor: deterministic runs must not
/// increase beyond round-off.
pub fn descent_line(records: &[IterationRecord], deterministic: bool) -> String {
    match descent_monitor(records) {
        None => "descent monitor: no reference, skipped".into(),
        Some(v) if deterministic => format!(
            "descent monitor: max relative increase {v:.3e} ({})",
            if v <= 1e-8 { "ok" } else { "VIOLATED" }
        ),
        Some(v) => format!("descent monitor: max relative increase {v:.3e} (stochastic run, increases allowed)"),
    }
}

/// Iterations until the objective first falls to `target`, `None` if never.
pub fn iterations_to_target(records: &[IterationRecord], target: f64) -> Option<usize> {
    records.iter().find(|r| r.objective <= target).map(|r| r.iteration)
}

/// `min × (1 + 1e-3)`, read as "within a relative 1e-3 of the minimum" for
/// negative minima.
pub fn target_of(min: f64) -> f64 {
    min + 1e-3 * min.abs()
}

pub fn text_block(lines: &[String]) -> String {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(s, "{l}");
    }
    s
}
