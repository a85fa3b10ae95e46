//! Turning a configuration into a problem, a step rule and a solver run.

use std::fs;
use std::path::{Path, PathBuf};

use blockpd::blocks::ConnectionGraph;
use blockpd::models::baselines::{ForwardBackwardSum, QuadraticSaddle, Tv1d};
use blockpd::models::dti::{DtiData, DtiProblem, DtiSetup};
use blockpd::models::export::read_dataset;
use blockpd::problem::{estimate_norms_static, NormBounds, Problem};
use blockpd::sampling::SamplingPlan;
use blockpd::solvers::{Algorithm, KappaMonitor, RunOutput, SolverRun};
use blockpd::stepper::{
    bar_gamma_fstar, bar_gamma_gk, init_dual_steps_from_weights, Family, GrowthLimits, Regime, StepConstants,
    StepState,
};
use sha2::{Digest, Sha256};

use crate::config::{
    AlgorithmTag, Experiment, ExperimentConfig, ProblemParams, ReferenceMode, RegimeTag, SamplingModeTag,
};
use crate::CliError;

const PRIMAL_STREAM: u64 = 0;
const DUAL_STREAM: u64 = 1;

pub fn algorithm(tag: AlgorithmTag) -> Algorithm {
    match tag {
        AlgorithmTag::FullDualV1 => Algorithm::FullDualV1,
        AlgorithmTag::FullDualV2 => Algorithm::FullDualV2,
        AlgorithmTag::FullPrimal => Algorithm::FullPrimal,
    }
}

pub fn regime(tag: RegimeTag) -> Regime {
    match tag {
        RegimeTag::Fixed => Regime::Fixed,
        RegimeTag::Acc2 => Regime::Acc2,
        RegimeTag::Acc => Regime::Acc,
        RegimeTag::Lin => Regime::Lin,
    }
}

fn lib_err(field: &str) -> impl Fn(blockpd::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{field}: {e}"))
}

/// A constructed problem and its preferred initial primal steps.
pub struct Built {
    pub problem: Box<dyn Problem>,
    pub default_tau: Option<Vec<f64>>,
}

/// Seed of the DTI data for run seed `seed`, `None` when the data are fixed.
pub fn data_seed(exp: &Experiment, seed: u64) -> Option<u64> {
    match exp.config.problem.parsed() {
        Ok(ProblemParams::Dti(p)) if p.data_file.is_none() => Some(p.data_seed.unwrap_or(seed)),
        _ => None,
    }
}

pub fn dti_data(exp: &Experiment, seed: u64) -> Result<DtiData, CliError> {
    let ProblemParams::Dti(p) = exp.config.problem.parsed()? else {
        return Err(CliError::Config("problem.name: not a DTI problem".into()));
    };
    match &p.data_file {
        Some(f) => {
            let path = exp.base_dir.join(f);
            let file = fs::File::open(&path)
                .map_err(|e| CliError::Config(format!("problem.params.data_file: {}: {e}", path.display())))?;
            read_dataset(std::io::BufReader::new(file)).map_err(lib_err("problem.params.data_file"))
        }
        None => DtiData::synthetic(p.dims, p.noise, p.data_seed.unwrap_or(seed)).map_err(lib_err("problem.params")),
    }
}

pub fn build_problem(exp: &Experiment, seed: u64) -> Result<Built, CliError> {
    let e = lib_err("problem.params");
    Ok(match exp.config.problem.parsed()? {
        ProblemParams::Dti(p) => {
            let setup: DtiSetup = p.setup.parse().map_err(lib_err("problem.params.setup"))?;
            let problem = DtiProblem::new(dti_data(exp, seed)?, p.alpha, setup).map_err(e)?;
            let tau = problem.recommended_tau();
            Built { problem: Box::new(problem), default_tau: Some(tau) }
        }
        ProblemParams::Quadratic(p) => Built {
            problem: Box::new(
                QuadraticSaddle::random(&p.primal_sizes, &p.dual_sizes, p.gamma_g, p.gamma_f, p.instance_seed)
                    .map_err(e)?,
            ),
            default_tau: None,
        },
        ProblemParams::Tv1d(p) => Built {
            problem: Box::new(
                Tv1d::new(Tv1d::step_signal(p.n, p.noise, p.signal_seed), p.alpha, p.gamma, p.primal_blocks, p.dual_blocks)
                    .map_err(e)?,
            ),
            default_tau: None,
        },
        ProblemParams::FbSum(p) => Built {
            problem: Box::new(
                ForwardBackwardSum::random(p.nx, p.primal_blocks, p.n_terms, p.rows, p.gamma, p.instance_seed)
                    .map_err(e)?,
            ),
            default_tau: None,
        },
    })
}

fn plan(cfg: &ExperimentConfig, n: usize, seed: u64, stream: u64) -> Result<SamplingPlan, CliError> {
    let s = &cfg.sampling;
    match s.mode {
        SamplingModeTag::Full => Ok(SamplingPlan::full(n)),
        SamplingModeTag::Bernoulli => {
            let p = s.probability.as_ref().expect("validated").expand(n, "sampling.probability")?;
            SamplingPlan::bernoulli(p, seed, stream).map_err(lib_err("sampling"))
        }
        SamplingModeTag::FixedCount => {
            SamplingPlan::fixed_count(n, s.count.expect("validated"), seed, stream).map_err(lib_err("sampling.count"))
        }
    }
}

pub fn graph_of(problem: &dyn Problem) -> ConnectionGraph {
    problem.connection_graph().unwrap_or_else(|| {
        ConnectionGraph::fully_connected(problem.primal_partition().n_blocks(), problem.dual_partition().n_blocks())
    })
}

pub fn bounds_of(problem: &dyn Problem, x: &[f64]) -> NormBounds {
    problem.norm_bounds(x).unwrap_or_else(|| estimate_norms_static(problem, x))
}

/// Everything needed to start a run, before the solver borrows the problem.
pub struct Setup {
    pub state: StepState,
    pub primal_plan: SamplingPlan,
    pub dual_plan: SamplingPlan,
    pub graph: ConnectionGraph,
}

pub fn build_setup(
    cfg: &ExperimentConfig,
    built: &Built,
    seed: u64,
    regime_tag: RegimeTag,
) -> Result<Setup, CliError> {
    let problem = built.problem.as_ref();
    let alg = algorithm(cfg.algorithm);
    let family = alg.family();
    let m = problem.primal_partition().n_blocks();
    let n = problem.dual_partition().n_blocks();
    let (primal_plan, dual_plan) = match family {
        Family::FullDual => (plan(cfg, m, seed, PRIMAL_STREAM)?, SamplingPlan::full(n)),
        Family::FullPrimal => (SamplingPlan::full(m), plan(cfg, n, seed, DUAL_STREAM)?),
    };
    let pp = primal_plan.effective_probabilities();
    let dp = dual_plan.effective_probabilities();
    let graph = graph_of(problem);
    let (x0, _) = problem.initial_point();
    let bounds = bounds_of(problem, &x0);
    let c = &cfg.constants;
    let tau0 = match (&c.tau, &built.default_tau) {
        (Some(t), _) => t.expand(m, "constants.tau")?,
        (None, Some(t)) => t.clone(),
        (None, None) => {
            let r = bounds.global.max(problem.lipschitz().unwrap_or(0.0));
            if !(r > 0.0 && r.is_finite()) {
                return Err(CliError::Config("constants.tau: no usable operator norm, give tau explicitly".into()));
            }
            vec![1.0 / r; m]
        }
    };
    let sigma0 = init_dual_steps_from_weights(&tau0, &graph, &bounds, c.kappa, family, &pp, &dp)
        .map_err(lib_err("constants"))?;
    let zero = |k| vec![0.0; k];
    let constants = StepConstants {
        kappa: c.kappa,
        delta: cfg.delta(),
        gamma_tilde_g: c.gamma_tilde_g.as_ref().map_or(Ok(zero(m)), |g| g.expand(m, "constants.gamma_tilde_g"))?,
        gamma_dual: c.gamma_dual.as_ref().map_or(Ok(zero(n)), |g| g.expand(n, "constants.gamma_dual"))?,
    };
    let zeta = c.zeta.as_ref().map(|z| z.expand(n, "constants.zeta")).transpose()?;
    let limits = GrowthLimits {
        primal: bar_gamma_gk(family, &problem.gamma_g(), &problem.gamma_k(), None),
        dual: bar_gamma_fstar(family, &problem.gamma_fstar(), &problem.nl_mask(), c.p, zeta.as_deref(), c.alpha_y),
    };
    let state = StepState::new(family, regime(regime_tag), tau0, sigma0, pp, dp, constants, Some(&limits))
        .map_err(lib_err("constants"))?;
    Ok(Setup { state, primal_plan, dual_plan, graph })
}

/// Result of one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub output: RunOutput,
    pub frozen_omega: f64,
    pub warnings: Vec<String>,
}

/// Runs one seed of `exp` for `max_iter` iterations.
pub fn run_seed(exp: &Experiment, seed: u64) -> Result<SeedRun, CliError> {
    let cfg = &exp.config;
    let built = build_problem(exp, seed)?;
    let setup = build_setup(cfg, &built, seed, cfg.regime)?;
    let reference = match &cfg.reference {
        None => None,
        Some(r) => Some(match r.mode {
            ReferenceMode::ClosedForm => built.problem.solution().ok_or_else(|| {
                CliError::Config("reference.mode: this problem has no closed-form solution, use long_run".into())
            })?,
            ReferenceMode::LongRun => {
                let iters = r.long_run_iters.unwrap_or(100 * cfg.max_iter.max(1));
                long_run_reference(exp, &built, seed, iters)?
            }
        }),
    };
    let frozen_omega = setup.state.frozen_omega();
    let warnings = setup.state.warnings().to_vec();
    let problem = built.problem.as_ref();
    let mut run = SolverRun::new(
        problem,
        setup.state,
        setup.primal_plan,
        setup.dual_plan,
        algorithm(cfg.algorithm),
        cfg.max_iter,
        cfg.log_every,
    )
    .map_err(lib_err("config"))?
    .with_monitor(KappaMonitor { graph: setup.graph, trailing: None, reinit_sigma: false });
    if let Some((x, y)) = reference {
        run = run.with_reference(x, y);
    }
    Ok(SeedRun { seed, output: run.run(), frozen_omega, warnings })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of everything the long-run reference depends on.
pub fn reference_hash(exp: &Experiment, seed: u64, iters: usize) -> Result<String, CliError> {
    let cfg = &exp.config;
    let problem = toml::to_string(&cfg.problem).map_err(|e| CliError::Config(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(problem.as_bytes());
    h.update(format!("|data_seed={:?}|kappa={:e}|iters={iters}", data_seed(exp, seed), cfg.constants.kappa).as_bytes());
    if let Some(t) = &cfg.constants.tau {
        h.update(format!("|tau={t:?}").as_bytes());
    }
    Ok(hex(&h.finalize()[..8]))
}

pub fn reference_path(exp: &Experiment, seed: u64, iters: usize) -> Result<PathBuf, CliError> {
    Ok(exp.base_dir.join(format!("{}.ref-{}.txt", exp.label, reference_hash(exp, seed, iters)?)))
}

fn parse_line(line: Option<&str>, tag: &str, len: usize) -> Option<Vec<f64>> {
    let rest = line?.strip_prefix(tag)?;
    let v: Vec<f64> = rest.split(',').filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_, _>>().ok()?;
    (v.len() == len).then_some(v)
}

fn read_reference(path: &Path, nx: usize, ny: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let x = parse_line(lines.next(), "x,", nx)?;
    let y = parse_line(lines.next(), "y,", ny)?;
    Some((x, y))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:e}")).collect::<Vec<_>>().join(",")
}

/// Saddle point estimate from a long deterministic fixed-step run, cached
/// next to the config under a content hash.
pub fn long_run_reference(
    exp: &Experiment,
    built: &Built,
    seed: u64,
    iters: usize,
) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let problem = built.problem.as_ref();
    let nx = problem.primal_partition().total_dim();
    let ny = problem.dual_partition().total_dim();
    let path = reference_path(exp, seed, iters)?;
    if let Some(r) = read_reference(&path, nx, ny) {
        log::info!("using cached reference {}", path.display());
        return Ok(r);
    }
    let mut cfg = exp.config.clone();
    cfg.algorithm = match cfg.algorithm {
        AlgorithmTag::FullPrimal => AlgorithmTag::FullPrimal,
        _ => AlgorithmTag::FullDualV1,
    };
    cfg.sampling = Default::default();
    cfg.constants.gamma_tilde_g = None;
    cfg.constants.gamma_dual = None;
    let setup = build_setup(&cfg, built, seed, RegimeTag::Fixed)?;
    let out = SolverRun::new(
        problem,
        setup.state,
        setup.primal_plan,
        setup.dual_plan,
        algorithm(cfg.algorithm),
        iters,
        iters.max(1),
    )
    .map_err(lib_err("reference"))?
    .run();
    if let Some(e) = out.error {
        return Err(CliError::Config(format!("reference: long run failed: {e}")));
    }
    let body = format!("# long-run reference, {iters} fixed-step iterations\nx,{}\ny,{}\n", join(&out.x), join(&out.y));
    if let Err(e) = fs::write(&path, body) {
        log::warn!("cannot cache reference at {}: {e}", path.display());
    }
    Ok((out.x, out.y))
}
