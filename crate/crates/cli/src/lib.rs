//! Experiment runner: configs in, CSV telemetry and text reports out.

pub mod config;
pub mod report;
pub mod setup;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use blockpd::diagnostics::{fit_rate, metric_lower_bound, RateModel};
use blockpd::problem::{check_adjoint, check_jacobian_fd};
use blockpd::stepper::{kappa_margin, Family};

use crate::config::{Experiment, SamplingModeTag};
use crate::report::{
    descent_line, iterations_to_target, rate_line, rate_models, read_run_csv, summary_rows, target_of, text_block,
    write_run_csv, write_summary_csv,
};
use crate::setup::{algorithm, bounds_of, build_problem, build_setup, dti_data, run_seed, SeedRun};

pub use config::ExperimentConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "BLOCKPD_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) => m,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 1,
        }
    }
}

/// Exit status of a run in which some seed diverged.
pub const EXIT_DIVERGED: i32 = 1;

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, exp: &mut Experiment) -> Result<(), CliError> {
        if let Some(s) = self.seed {
            exp.config.seeds = vec![s];
        }
        if let Some(n) = self.max_iter {
            exp.config.max_iter = n;
        }
        exp.config.validate()
    }
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn deterministic(exp: &Experiment) -> bool {
    exp.config.sampling.mode == SamplingModeTag::Full
}

fn fit_window(exp: &Experiment) -> (usize, usize) {
    match exp.config.fit_window {
        Some([lo, hi]) => (lo, hi),
        None => ((exp.config.max_iter / 50).max(1), exp.config.max_iter),
    }
}

/// Problem-level checks at the initial point of the first seed.
pub fn static_checks(exp: &Experiment) -> Result<Vec<String>, CliError> {
    let cfg = &exp.config;
    let seed = cfg.seeds[0];
    let built = build_problem(exp, seed)?;
    let p = built.problem.as_ref();
    let setup = build_setup(cfg, &built, seed, cfg.regime)?;
    let (x0, _) = p.initial_point();
    let mut lines = vec![
        format!("experiment: {}", exp.label),
        format!("problem: {:?}", cfg.problem.name),
        format!(
            "primal: dim {} in {} blocks; dual: dim {} in {} blocks",
            p.primal_partition().total_dim(),
            p.primal_partition().n_blocks(),
            p.dual_partition().total_dim(),
            p.dual_partition().n_blocks()
        ),
        format!("algorithm: {:?}, regime: {:?}", cfg.algorithm, cfg.regime),
        format!("frozen omega: {:e}", setup.state.frozen_omega()),
    ];
    for w in setup.state.warnings() {
        lines.push(format!("warning: {w}"));
    }
    lines.push(format!("adjoint test error: {:.3e}", check_adjoint(p, &x0, 20, seed)));
    let h = 1e-6 * (1.0 + x0.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    match check_jacobian_fd(p, &x0, 5, h, seed) {
        Ok(e) => lines.push(format!("jacobian finite-difference error: {e:.3e}")),
        Err(e) => lines.push(format!("jacobian finite-difference check failed: {e}")),
    }
    let margin = kappa_margin(&setup.state, &setup.graph, &bounds_of(p, &x0));
    lines.push(format!(
        "kappa margin at x0: {margin:.3e} ({})",
        if margin >= -1e-12 { "ok" } else { "sigma-test FAILS" }
    ));
    let sampled = match algorithm(cfg.algorithm).family() {
        Family::FullDual => setup.primal_plan.draw(0),
        Family::FullPrimal => setup.dual_plan.draw(0),
    };
    match metric_lower_bound(p, &setup.state, &x0, &sampled, cfg.delta(), cfg.constants.kappa) {
        Ok(v) => lines.push(format!(
            "metric check at x0: smallest eigenvalue {v:.3e} ({})",
            if v >= -1e-10 { "ok" } else { "VIOLATED" }
        )),
        Err(e) => lines.push(format!("metric check skipped: {e}")),
    }
    Ok(lines)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub output_dir: PathBuf,
    pub runs: Vec<SeedRun>,
}

impl ExperimentResult {
    pub fn diverged(&self) -> bool {
        self.runs.iter().any(|r| r.output.error.is_some())
    }

    pub fn exit_code(&self) -> i32 {
        if self.diverged() {
            EXIT_DIVERGED
        } else {
            0
        }
    }
}

/// Runs all seeds concurrently, in seed order of the config.
pub fn run_seeds(exp: &Experiment) -> Result<Vec<SeedRun>, CliError> {
    let results: Vec<Result<SeedRun, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = exp.config.seeds.iter().map(|&seed| s.spawn(move || run_seed(exp, seed))).collect();
        handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
    });
    results.into_iter().collect()
}

/// Runs an experiment and writes `run_<seed>.csv`, `summary.csv` and
/// `diagnostics.txt` into `out_dir`.
pub fn run_experiment(exp: &Experiment, out_dir: &Path) -> Result<ExperimentResult, CliError> {
    let checks = static_checks(exp)?;
    mkdir(out_dir)?;
    let runs = run_seeds(exp)?;
    let mut parsed = Vec::new();
    for r in &runs {
        let path = out_dir.join(format!("run_{}.csv", r.seed));
        write_run_csv(&path, &exp.label, r.seed, &r.output.records)?;
        parsed.push(read_run_csv(&path)?);
    }
    let rows = summary_rows(&parsed);
    let window = fit_window(exp);
    let mut notes = Vec::new();
    let (its, means): (Vec<usize>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| Some((r[0].parse::<usize>().ok()?, r[4].parse::<f64>().ok()?)))
        .filter(|(n, _)| *n >= window.0 && *n <= window.1)
        .unzip();
    if !means.is_empty() {
        for model in rate_models(exp.config.regime) {
            match fit_rate(&its, &means, model) {
                Ok(f) => notes.push(format!(
                    "rate_fit column=dist2_plain_mean model={model:?} window=[{},{}] slope={:e} factor={:e} r2={:.4}",
                    f.window.0,
                    f.window.1,
                    f.slope,
                    f.slope.exp(),
                    f.r_squared
                )),
                Err(e) => notes.push(format!("rate_fit model={model:?} unavailable: {e}")),
            }
        }
    }
    write_summary_csv(&out_dir.join("summary.csv"), &exp.label, &rows, &notes)?;

    let mut lines = checks;
    lines.push(String::new());
    for r in &runs {
        let rec = &r.output.records;
        lines.push(format!("seed {}:", r.seed));
        match &r.output.error {
            Some(e) => lines.push(format!("  status: {e}")),
            None => lines.push(format!("  status: completed {} iterations", exp.config.max_iter)),
        }
        if let Some(last) = rec.last() {
            lines.push(format!("  final objective: {:e}", last.objective));
        }
        for w in &r.warnings {
            lines.push(format!("  warning: {w}"));
        }
        if rec.iter().any(|x| x.dist2_plain.is_some()) {
            for model in rate_models(exp.config.regime) {
                lines.push(format!("  {}", rate_line(rec, window, model, r.frozen_omega)));
            }
        } else {
            lines.push("  rate fits: no reference".into());
        }
        lines.push(format!("  {}", descent_line(rec, deterministic(exp))));
        if let Some(worst) = rec.iter().filter_map(|x| x.kappa_margin).reduce(f64::min) {
            lines.push(format!("  smallest logged kappa margin: {worst:.3e}"));
        }
    }
    if !notes.is_empty() {
        lines.push(String::new());
        lines.push("across seeds:".into());
        lines.extend(notes.iter().map(|n| format!("  {n}")));
    }
    write_text(&out_dir.join("diagnostics.txt"), &text_block(&lines))?;
    Ok(ExperimentResult { output_dir: out_dir.to_path_buf(), runs })
}

/// Diagnostics only; writes `diagnostics.txt` into `out_dir`.
pub fn check(exp: &Experiment, out_dir: &Path) -> Result<String, CliError> {
    let text = text_block(&static_checks(exp)?);
    mkdir(out_dir)?;
    write_text(&out_dir.join("diagnostics.txt"), &text)?;
    Ok(text)
}

/// Writes the DTI dataset of `seed` in the binary export format.
pub fn export_data(exp: &Experiment, seed: u64, path: &Path) -> Result<(), CliError> {
    let data = dti_data(exp, seed)?;
    let file = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    blockpd::models::export::write_dataset(&data, std::io::BufWriter::new(file))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub seed: u64,
    pub target: f64,
    /// `None` marks a variant that never reached the target or diverged.
    pub iterations: Option<usize>,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub label: String,
    pub dnf: usize,
    /// Mean iterations-to-target over the seeds where the target was reached.
    pub mean_iterations: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub ranking: Vec<Ranking>,
    pub results: Vec<ExperimentResult>,
    pub text: String,
}

impl Comparison {
    pub fn iterations(&self, label: &str, seed: u64) -> Option<usize> {
        self.rows.iter().find(|r| r.label == label && r.seed == seed).and_then(|r| r.iterations)
    }
}

fn cell(v: Option<usize>) -> String {
    v.map(|n| n.to_string()).unwrap_or_else(|| "DNF".into())
}

/// Runs every variant and tabulates iterations to reach, per seed, the
/// smallest objective any variant achieved relaxed by a relative 1e-3.
pub fn compare_variants(exps: &[Experiment], out_dir: &Path) -> Result<Comparison, CliError> {
    let first = exps.first().ok_or_else(|| CliError::Config("compare needs at least one config".into()))?;
    for e in exps {
        if e.config.problem.shared_part() != first.config.problem.shared_part() {
            return Err(CliError::Config(format!("{}: problem differs from {}", e.label, first.label)));
        }
        if e.config.seeds != first.config.seeds {
            return Err(CliError::Config(format!("{}: seed list differs from {}", e.label, first.label)));
        }
        if exps.iter().filter(|o| o.label == e.label).count() > 1 {
            return Err(CliError::Config(format!("duplicate variant label {}", e.label)));
        }
    }
    mkdir(out_dir)?;
    let results: Vec<Result<ExperimentResult, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            exps.iter().map(|e| s.spawn(move || run_experiment(e, &out_dir.join(&e.label)))).collect();
        handles.into_iter().map(|h| h.join().expect("variant thread panicked")).collect()
    });
    let results: Vec<ExperimentResult> = results.into_iter().collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for (k, &seed) in first.config.seeds.iter().enumerate() {
        let min = results
            .iter()
            .flat_map(|r| r.runs[k].output.records.iter().map(|x| x.objective))
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        let target = target_of(min);
        for (e, r) in exps.iter().zip(&results) {
            let run = &r.runs[k].output;
            let iterations = if run.error.is_some() { None } else { iterations_to_target(&run.records, target) };
            let final_objective = run.records.last().map_or(f64::NAN, |x| x.objective);
            rows.push(CompareRow { label: e.label.clone(), seed, target, iterations, final_objective });
            let (its, gaps): (Vec<usize>, Vec<f64>) = run
                .records
                .iter()
                .filter(|x| x.iteration >= fit_window(e).0 && x.iteration <= fit_window(e).1)
                .map(|x| (x.iteration, x.objective - min))
                .unzip();
            if let Ok(f) = fit_rate(&its, &gaps, RateModel::Power) {
                fits.push((e.label.clone(), seed, f.slope));
            }
        }
    }

    let mut ranking: Vec<Ranking> = exps
        .iter()
        .map(|e| {
            let mine: Vec<&CompareRow> = rows.iter().filter(|r| r.label == e.label).collect();
            let reached: Vec<f64> = mine.iter().filter_map(|r| r.iterations.map(|n| n as f64)).collect();
            Ranking {
                label: e.label.clone(),
                dnf: mine.len() - reached.len(),
                mean_iterations: (!reached.is_empty()).then(|| reached.iter().sum::<f64>() / reached.len() as f64),
            }
        })
        .collect();
    ranking.sort_by(|a, b| {
        a.dnf.cmp(&b.dnf).then(
            a.mean_iterations.unwrap_or(f64::INFINITY).total_cmp(&b.mean_iterations.unwrap_or(f64::INFINITY)),
        )
    });

    let path = out_dir.join("compare.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let csv_io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(["variant", "seed", "target", "iterations_to_target", "final_objective"]).map_err(csv_io)?;
    for r in &rows {
        w.write_record([
            r.label.clone(),
            r.seed.to_string(),
            format!("{:e}", r.target),
            cell(r.iterations),
            format!("{:e}", r.final_objective),
        ])
        .map_err(csv_io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;

    let width = exps.iter().map(|e| e.label.len()).max().unwrap_or(7).max(7);
    let mut text = String::new();
    let _ = write!(text, "{:width$}", "variant");
    for s in &first.config.seeds {
        let _ = write!(text, " {:>10}", format!("seed {s}"));
    }
    text.push('\n');
    for e in exps {
        let _ = write!(text, "{:width$}", e.label);
        for &s in &first.config.seeds {
            let v = rows.iter().find(|r| r.label == e.label && r.seed == s).and_then(|r| r.iterations);
            let _ = write!(text, " {:>10}", cell(v));
        }
        text.push('\n');
    }
    text.push_str("\nranking (fewest DNF, then mean iterations to target):\n");
    for (i, r) in ranking.iter().enumerate() {
        let mean = r.mean_iterations.map_or("-".to_string(), |m| format!("{m:.1}"));
        let _ = writeln!(text, "{:>3}. {:width$} DNF {}  mean {}", i + 1, r.label, r.dnf, mean);
    }
    if !fits.is_empty() {
        text.push_str("\npower fits of objective - best objective:\n");
        for (label, seed, slope) in &fits {
            let _ = writeln!(text, "  {label:width$} seed {seed}: slope {slope:.4}");
        }
    }
    write_text(&out_dir.join("compare.txt"), &text)?;
    Ok(Comparison { rows, ranking, results, text })
}
