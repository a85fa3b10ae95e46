//! The full-dual (two variants) and full-primal iterations, and a driver
//! that advances step rules, samples blocks and records telemetry.

use crate::blocks::ConnectionGraph;
use crate::problem::{dot, NormBounds, Problem};
use crate::sampling::SamplingPlan;
use crate::stepper::{init_dual_steps_from_weights, kappa_margin, Family, StepState, TrailingNormEstimator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Primal blocks sampled, dual evaluated at the over-relaxed point.
    FullDualV1,
    /// Primal blocks sampled, dual corrected through the Jacobian.
    FullDualV2,
    /// Dual blocks sampled, all primal blocks updated.
    FullPrimal,
}

impl Algorithm {
    pub fn family(self) -> Family {
        match self {
            Algorithm::FullDualV1 | Algorithm::FullDualV2 => Family::FullDual,
            Algorithm::FullPrimal => Family::FullPrimal,
        }
    }
}

fn check_finite(x: &[f64], y: &[f64], iteration: usize) -> Result<()> {
    if x.iter().chain(y).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { iteration, reason: "non-finite iterate".into() })
    }
}

/// One full-dual iteration with primal blocks `sampled`.
pub fn step_full_dual(
    problem: &dyn Problem,
    state: &StepState,
    second_variant: bool,
    x: &mut [f64],
    y: &mut [f64],
    sampled: &[usize],
) {
    let pp = problem.primal_partition();
    let dp = problem.dual_partition();
    let jac = problem.jacobian(x);
    let mut g = vec![0.0; pp.total_dim()];
    jac.apply_adjoint(y, &mut g);
    let x_old = x.to_vec();
    for &j in sampled {
        let t = state.tau[j];
        for i in pp.block(j).iter() {
            x[i] -= t * g[i];
        }
        problem.prox_g(j, t, x);
    }
    let mut ky = vec![0.0; dp.total_dim()];
    if second_variant {
        let mut d = vec![0.0; pp.total_dim()];
        for &j in sampled {
            let f = state.omega_bar / state.primal_probs[j] + 1.0;
            for i in pp.block(j).iter() {
                d[i] = f * (x[i] - x_old[i]);
            }
        }
        let mut jd = vec![0.0; dp.total_dim()];
        jac.apply(&d, &mut jd);
        problem.k_eval(&x_old, &mut ky);
        for (k, j) in ky.iter_mut().zip(&jd) {
            *k += j;
        }
    } else {
        let mut xbar = x.to_vec();
        for &j in sampled {
            let f = state.omega_bar / state.primal_probs[j];
            for i in pp.block(j).iter() {
                xbar[i] = x[i] + f * (x[i] - x_old[i]);
            }
        }
        problem.k_eval(&xbar, &mut ky);
    }
    for l in 0..dp.n_blocks() {
        let s = state.sigma[l];
        for i in dp.block(l).iter() {
            y[i] += s * ky[i];
        }
        problem.prox_fstar(l, s, y);
    }
}

/// One full-primal iteration with dual blocks `sampled`.
pub fn step_full_primal(
    problem: &dyn Problem,
    state: &StepState,
    x: &mut [f64],
    y: &mut [f64],
    sampled: &[usize],
) {
    let pp = problem.primal_partition();
    let dp = problem.dual_partition();
    let mut kx = vec![0.0; dp.total_dim()];
    problem.k_eval_blocks(x, sampled, &mut kx);
    let mut z = vec![0.0; dp.total_dim()];
    for &l in sampled {
        let s = state.sigma[l];
        let old = dp.gather(l, y);
        for i in dp.block(l).iter() {
            y[i] += s * kx[i];
        }
        problem.prox_fstar(l, s, y);
        let f = state.omega_bar / state.dual_probs[l];
        for (i, yo) in dp.block(l).iter().zip(old) {
            z[i] = y[i] + f * (y[i] - yo);
        }
    }
    let jac = problem.jacobian(x);
    let mut g = vec![0.0; pp.total_dim()];
    jac.apply_adjoint(&z, &mut g);
    drop(jac);
    for j in 0..pp.n_blocks() {
        let t = state.tau[j];
        for i in pp.block(j).iter() {
            x[i] -= t * g[i];
        }
        problem.prox_g(j, t, x);
    }
}

/// `‖u − u*‖²` in the metric `Z_{i+1}M_{i+1}` of `state`, with the
/// off-diagonal part built from `∇K(x)` and the block set `sampled`
/// (`S(i)` full-dual, `V(i+1)` full-primal).
pub fn weighted_dist2(
    problem: &dyn Problem,
    state: &StepState,
    x: &[f64],
    y: &[f64],
    xs: &[f64],
    ys: &[f64],
    sampled: &[usize],
) -> f64 {
    let pp = problem.primal_partition();
    let dp = problem.dual_partition();
    let dx: Vec<f64> = x.iter().zip(xs).map(|(a, b)| a - b).collect();
    let dy: Vec<f64> = y.iter().zip(ys).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for j in 0..pp.n_blocks() {
        total += state.phi[j] * pp.block_norm_sq(j, &dx);
    }
    for l in 0..dp.n_blocks() {
        total += state.psi[l] * dp.block_norm_sq(l, &dy);
    }
    let jac = problem.jacobian(x);
    let mut t = vec![0.0; dp.total_dim()];
    let cross = match state.family {
        Family::FullDual => {
            let mut a = vec![0.0; pp.total_dim()];
            for &j in sampled {
                let c = state.phi[j] * state.tau[j];
                for i in pp.block(j).iter() {
                    a[i] = c * dx[i];
                }
            }
            jac.apply(&a, &mut t);
            dot(&t, &dy)
        }
        Family::FullPrimal => {
            jac.apply(&dx, &mut t);
            -sampled
                .iter()
                .map(|&l| {
                    let c = state.sigma[l] * state.psi[l];
                    c * dp.block(l).iter().map(|i| t[i] * dy[i]).sum::<f64>()
                })
                .sum::<f64>()
        }
    };
    (total - 2.0 * cross) * state.scale()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Number of completed iterations `N`; the iterate is `u^N`.
    pub iteration: usize,
    pub objective: f64,
    /// `‖x^N − x*‖² + ‖y^N − y*‖²`.
    pub dist2_plain: Option<f64>,
    /// `‖x^N − x*‖²`.
    pub dist2_primal: Option<f64>,
    /// `‖u^N − u*‖²` in the `Z_{N+1}M_{N+1}` metric.
    pub dist2_weighted: Option<f64>,
    /// Blocks sampled on the iteration that produced `u^N`.
    pub sampled_primal: Vec<usize>,
    pub sampled_dual: Vec<usize>,
    pub omega_bar: f64,
    pub min_tau: f64,
    pub max_tau: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
    pub kappa_margin: Option<f64>,
}

/// Monitoring of the sigma-test along the run.
#[derive(Debug, Clone)]
pub struct KappaMonitor {
    pub graph: ConnectionGraph,
    /// When set, margins use trailing-window norm estimates.
    pub trailing: Option<TrailingNormEstimator>,
    /// Re-derive `σ` from the trailing estimates every window.
    pub reinit_sigma: bool,
}

pub struct SolverRun<'a> {
    pub problem: &'a dyn Problem,
    pub state: StepState,
    pub primal_plan: SamplingPlan,
    pub dual_plan: SamplingPlan,
    pub algorithm: Algorithm,
    pub max_iter: usize,
    pub log_every: usize,
    pub reference: Option<(Vec<f64>, Vec<f64>)>,
    pub monitor: Option<KappaMonitor>,
    pub initial: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub state: StepState,
    /// Set when the run stopped early.
    pub error: Option<Error>,
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-14 * y.abs())
}

impl<'a> SolverRun<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem: &'a dyn Problem,
        state: StepState,
        primal_plan: SamplingPlan,
        dual_plan: SamplingPlan,
        algorithm: Algorithm,
        max_iter: usize,
        log_every: usize,
    ) -> Result<Self> {
        let m = problem.primal_partition().n_blocks();
        let n = problem.dual_partition().n_blocks();
        if primal_plan.n_blocks() != m || dual_plan.n_blocks() != n {
            return Err(Error::Structure("sampling plans do not match the problem blocks".into()));
        }
        if state.n_primal() != m || state.n_dual() != n {
            return Err(Error::Structure("step state does not match the problem blocks".into()));
        }
        if state.family != algorithm.family() {
            return Err(Error::Config("step rule family does not match the algorithm".into()));
        }
        match algorithm.family() {
            Family::FullDual if !dual_plan.is_full() => {
                return Err(Error::Config("full-dual algorithms need full dual sampling".into()))
            }
            Family::FullPrimal if !primal_plan.is_full() => {
                return Err(Error::Config("the full-primal algorithm needs full primal sampling".into()))
            }
            _ => {}
        }
        if !close(&state.primal_probs, &primal_plan.effective_probabilities())
            || !close(&state.dual_probs, &dual_plan.effective_probabilities())
        {
            return Err(Error::Config(
                "step state probabilities differ from the sampling plans".into(),
            ));
        }
        if log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(SolverRun {
            problem,
            state,
            primal_plan,
            dual_plan,
            algorithm,
            max_iter,
            log_every,
            reference: None,
            monitor: None,
            initial: None,
        })
    }

    pub fn with_reference(mut self, x: Vec<f64>, y: Vec<f64>) -> Self {
        self.reference = Some((x, y));
        self
    }

    pub fn with_monitor(mut self, monitor: KappaMonitor) -> Self {
        self.monitor = Some(monitor);
        self
    }

    pub fn with_initial(mut self, x: Vec<f64>, y: Vec<f64>) -> Self {
        self.initial = Some((x, y));
        self
    }

    fn draw(&self, iteration: usize) -> (Vec<usize>, Vec<usize>) {
        let i = iteration as u64;
        (self.primal_plan.draw(i), self.dual_plan.draw(i))
    }

    fn record(
        &self,
        state: &StepState,
        monitor: &Option<KappaMonitor>,
        iteration: usize,
        x: &[f64],
        y: &[f64],
        last: &(Vec<usize>, Vec<usize>),
    ) -> IterationRecord {
        let p = self.problem;
        let objective = p.objective(x);
        let (mut plain, mut primal, mut weighted) = (None, None, None);
        if let Some((xs, ys)) = &self.reference {
            let dxp: f64 = x.iter().zip(xs).map(|(a, b)| (a - b) * (a - b)).sum();
            let dyp: f64 = y.iter().zip(ys).map(|(a, b)| (a - b) * (a - b)).sum();
            primal = Some(dxp);
            plain = Some(dxp + dyp);
            let (s, v) = self.draw(iteration);
            let sampled = match state.family {
                Family::FullDual => s,
                Family::FullPrimal => v,
            };
            weighted = Some(weighted_dist2(p, state, x, y, xs, ys, &sampled));
        }
        let margin = monitor.as_ref().and_then(|m| {
            let bounds = match &m.trailing {
                Some(t) if !t.is_empty() => {
                    let mut b = NormBounds::from_per_dual(t.estimate());
                    b.per_pair = None;
                    Some(b)
                }
                _ => p.norm_bounds(x),
            }?;
            Some(kappa_margin(state, &m.graph, &bounds))
        });
        let (min_tau, max_tau) = min_max(&state.tau);
        let (min_sigma, max_sigma) = min_max(&state.sigma);
        IterationRecord {
            iteration,
            objective,
            dist2_plain: plain,
            dist2_primal: primal,
            dist2_weighted: weighted,
            sampled_primal: last.0.clone(),
            sampled_dual: last.1.clone(),
            omega_bar: state.omega_bar,
            min_tau,
            max_tau,
            min_sigma,
            max_sigma,
            kappa_margin: margin,
        }
    }

    /// Runs `max_iter` iterations, logging `u^0`, every `log_every`-th
    /// iterate and the last one.
    pub fn run(&self) -> RunOutput {
        let p = self.problem;
        let (mut x, mut y) = self.initial.clone().unwrap_or_else(|| p.initial_point());
        let mut state = self.state.clone();
        let mut monitor = self.monitor.clone();
        let mut records = Vec::new();
        if self.max_iter == 0 {
            return RunOutput { records, x, y, state, error: None };
        }
        let none = (vec![], vec![]);
        let first = self.record(&state, &monitor, 0, &x, &y, &none);
        let limit = 1e12 * first.objective.abs().max(1.0);
        records.push(first);
        let mut error = None;
        for i in 0..self.max_iter {
            let sets = self.draw(i);
            match self.algorithm {
                Algorithm::FullDualV1 => step_full_dual(p, &state, false, &mut x, &mut y, &sets.0),
                Algorithm::FullDualV2 => step_full_dual(p, &state, true, &mut x, &mut y, &sets.0),
                Algorithm::FullPrimal => step_full_primal(p, &state, &mut x, &mut y, &sets.1),
            }
            state.advance();
            let n = i + 1;
            if let Err(e) = check_finite(&x, &y, n) {
                error = Some(e);
                break;
            }
            if let Some(m) = monitor.as_mut() {
                if let Some(t) = m.trailing.as_mut() {
                    if let Some(b) = p.norm_bounds(&x) {
                        t.observe(&b.per_dual);
                    }
                    if m.reinit_sigma && n % t.window() == 0 && !t.is_empty() {
                        let b = NormBounds::from_per_dual(t.estimate());
                        if let Ok(s) = init_dual_steps_from_weights(
                            &state.tau0,
                            &m.graph,
                            &b,
                            state.constants.kappa,
                            state.family,
                            &state.primal_probs,
                            &state.dual_probs,
                        ) {
                            let f: Vec<f64> = s.iter().zip(&state.sigma0).map(|(a, b)| a / b).collect();
                            state.rescale_dual(&f);
                        }
                    }
                }
            }
            if n % self.log_every == 0 || n == self.max_iter {
                let rec = self.record(&state, &monitor, n, &x, &y, &sets);
                let bad = !rec.objective.is_finite() || rec.objective > limit;
                records.push(rec);
                if bad {
                    error = Some(Error::Divergence {
                        iteration: n,
                        reason: "objective exceeded 1e12 times its initial value".into(),
                    });
                    break;
                }
            }
        }
        RunOutput { records, x, y, state, error }
    }
}
