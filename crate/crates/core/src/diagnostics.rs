//! Desk-scale numerical checks: the local metric lower bound, rate fits,
//! the descent monitor, a three-point-condition falsifier and the `z̄`
//! recursion. Everything here assembles dense matrices and is meant for
//! small instances only.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::problem::{dot, random_normal, Problem};
use crate::solvers::IterationRecord;
use crate::stepper::{Family, StepState};
use crate::{Error, Result};

/// Largest total dimension accepted by the dense checks.
pub const MAX_DENSE_DIM: usize = 200;

/// `∇K(x)` as a dense matrix, one column per primal coordinate.
pub fn dense_jacobian(problem: &dyn Problem, x: &[f64]) -> DMatrix<f64> {
    let nx = problem.primal_partition().total_dim();
    let ny = problem.dual_partition().total_dim();
    let jac = problem.jacobian(x);
    let mut m = DMatrix::zeros(ny, nx);
    let mut e = vec![0.0; nx];
    let mut col = vec![0.0; ny];
    for i in 0..nx {
        e[i] = 1.0;
        jac.apply(&e, &mut col);
        e[i] = 0.0;
        m.set_column(i, &DVector::from_column_slice(&col));
    }
    m
}

/// Coordinate-level pieces of `Z_{i+1}M_{i+1} = [[Φ, −Λ*], [−Λ, Ψ]]`:
/// the diagonals of `Φ` and `Ψ` and the coupling `Λ`.
pub struct MetricParts {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub lambda: DMatrix<f64>,
}

/// Assemble the metric of `state` at `x` with block set `sampled`
/// (`S(i)` for the full-dual family, `V(i+1)` for the full-primal one).
pub fn assemble_metric(problem: &dyn Problem, state: &StepState, x: &[f64], sampled: &[usize]) -> MetricParts {
    let pp = problem.primal_partition();
    let dp = problem.dual_partition();
    let mut phi = vec![0.0; pp.total_dim()];
    for j in 0..pp.n_blocks() {
        for i in pp.block(j).iter() {
            phi[i] = state.phi[j];
        }
    }
    let mut psi = vec![0.0; dp.total_dim()];
    for l in 0..dp.n_blocks() {
        for i in dp.block(l).iter() {
            psi[i] = state.psi[l];
        }
    }
    let jac = dense_jacobian(problem, x);
    let mut lambda = DMatrix::zeros(jac.nrows(), jac.ncols());
    match state.family {
        Family::FullDual => {
            for &j in sampled {
                let c = state.phi[j] * state.tau[j];
                for i in pp.block(j).iter() {
                    lambda.set_column(i, &(jac.column(i) * c));
                }
            }
        }
        Family::FullPrimal => {
            for &l in sampled {
                let c = -state.sigma[l] * state.psi[l];
                for i in dp.block(l).iter() {
                    lambda.set_row(i, &(jac.row(i) * c));
                }
            }
        }
    }
    MetricParts { phi, psi, lambda }
}

/// The symmetric matrix `ZM − diag(δΦ, ((κ−δ)/(1−δ))Ψ)`.
pub fn metric_difference(phi: &[f64], psi: &[f64], lambda: &DMatrix<f64>, delta: f64, kappa: f64) -> Result<DMatrix<f64>> {
    let (nx, ny) = (phi.len(), psi.len());
    if lambda.nrows() != ny || lambda.ncols() != nx {
        return Err(Error::Structure(format!(
            "coupling is {}x{}, expected {ny}x{nx}",
            lambda.nrows(),
            lambda.ncols()
        )));
    }
    if nx + ny > MAX_DENSE_DIM {
        return Err(Error::Diagnostic(format!("dense metric of dimension {} exceeds {MAX_DENSE_DIM}", nx + ny)));
    }
    if !(0.0 < delta && delta <= kappa && kappa < 1.0) {
        return Err(Error::Config(format!("need 0 < δ ≤ κ < 1, got δ = {delta}, κ = {kappa}")));
    }
    let dual_factor = 1.0 - (kappa - delta) / (1.0 - delta);
    let n = nx + ny;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..nx {
        m[(i, i)] = (1.0 - delta) * phi[i];
    }
    for i in 0..ny {
        m[(nx + i, nx + i)] = dual_factor * psi[i];
    }
    for r in 0..ny {
        for c in 0..nx {
            m[(nx + r, c)] = -lambda[(r, c)];
            m[(c, nx + r)] = -lambda[(r, c)];
        }
    }
    let asym = (&m - m.transpose()).amax();
    if asym != 0.0 {
        return Err(Error::Diagnostic(format!("assembled metric is not symmetric (defect {asym:e})")));
    }
    Ok(m)
}

/// Smallest eigenvalue of `ZM − diag(δΦ, ((κ−δ)/(1−δ))Ψ)`; a value
/// `≥ −1e-10` certifies the step condition.
pub fn check_metric_lower_bound(phi: &[f64], psi: &[f64], lambda: &DMatrix<f64>, delta: f64, kappa: f64) -> Result<f64> {
    let m = metric_difference(phi, psi, lambda, delta, kappa)?;
    Ok(m.symmetric_eigenvalues().min())
}

/// [`check_metric_lower_bound`] for the metric of `state` at `x`.
pub fn metric_lower_bound(
    problem: &dyn Problem,
    state: &StepState,
    x: &[f64],
    sampled: &[usize],
    delta: f64,
    kappa: f64,
) -> Result<f64> {
    let p = assemble_metric(problem, state, x, sampled);
    check_metric_lower_bound(&p.phi, &p.psi, &p.lambda, delta, kappa)
}

/// Smallest eigenvalue of a symmetric matrix without an eigensolver: the
/// best Rayleigh quotient over `n_random` random vectors seeds inverse
/// iteration shifted below the Gershgorin bound, finished by Rayleigh
/// quotient iteration.
pub fn rayleigh_min(m: &DMatrix<f64>, n_random: usize, seed: u64) -> f64 {
    let n = m.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rq = |v: &DVector<f64>| v.dot(&(m * v)) / v.dot(v);
    let mut best = DVector::from_vec(random_normal(&mut rng, n));
    let mut best_q = rq(&best);
    for _ in 1..n_random.max(1) {
        let v = DVector::from_vec(random_normal(&mut rng, n));
        let q = rq(&v);
        if q < best_q {
            best_q = q;
            best = v;
        }
    }
    let gersh = (0..n)
        .map(|i| m[(i, i)] - (0..n).filter(|&k| k != i).map(|k| m[(i, k)].abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    let scale = m.amax().max(1e-300);
    let shift = gersh - 1e-3 * scale;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut v = best.normalize();
    if let Some(lu) = (m - &eye * shift).lu().try_inverse() {
        let mut last = f64::INFINITY;
        for _ in 0..10_000 {
            v = (&lu * &v).normalize();
            let q = rq(&v);
            if (last - q).abs() <= 1e-15 * scale {
                break;
            }
            last = q;
        }
    }
    let mut q = rq(&v);
    for _ in 0..5 {
        match (m - &eye * q).lu().solve(&v) {
            Some(w) if w.iter().all(|a| a.is_finite()) && w.norm() > 0.0 => {
                v = w.normalize();
                q = rq(&v);
            }
            _ => break,
        }
    }
    q.min(best_q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateModel {
    /// `e_N ≈ C N^slope`.
    Power,
    /// `e_N ≈ C exp(slope · N)`.
    Exponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    /// First and last iteration used.
    pub window: (usize, usize),
    pub slope: f64,
    pub model: RateModel,
    pub r_squared: f64,
}

/// Least-squares slope of `log e` against `log N` or `N`. Non-positive
/// errors (and `N = 0` for the power model) are dropped with a warning.
pub fn fit_rate(iterations: &[usize], errors: &[f64], model: RateModel) -> Result<RateFit> {
    if iterations.len() != errors.len() {
        return Err(Error::Diagnostic("iteration and error series differ in length".into()));
    }
    let pts: Vec<(usize, f64, f64)> = iterations
        .iter()
        .zip(errors)
        .filter(|&(&n, &e)| e > 0.0 && e.is_finite() && (model == RateModel::Exponential || n > 0))
        .map(|(&n, &e)| {
            let t = match model {
                RateModel::Power => (n as f64).ln(),
                RateModel::Exponential => n as f64,
            };
            (n, t, e.ln())
        })
        .collect();
    if pts.len() < iterations.len() {
        log::warn!("rate fit dropped {} unusable points", iterations.len() - pts.len());
    }
    if pts.len() < 10 {
        return Err(Error::Diagnostic(format!("rate fit needs at least 10 usable points, have {}", pts.len())));
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let ml = pts.iter().map(|p| p.2).sum::<f64>() / k;
    let stt = pts.iter().map(|p| (p.1 - mt).powi(2)).sum::<f64>();
    let stl = pts.iter().map(|p| (p.1 - mt) * (p.2 - ml)).sum::<f64>();
    let sll = pts.iter().map(|p| (p.2 - ml).powi(2)).sum::<f64>();
    if stt == 0.0 {
        return Err(Error::Diagnostic("rate fit window has a single abscissa".into()));
    }
    let slope = stl / stt;
    let r_squared = if sll == 0.0 { 1.0 } else { (stl * stl / (stt * sll)).clamp(0.0, 1.0) };
    let window = (pts.iter().map(|p| p.0).min().unwrap_or(0), pts.iter().map(|p| p.0).max().unwrap_or(0));
    Ok(RateFit { window, slope, model, r_squared })
}

/// Rate fit of one record column restricted to `lo ≤ N ≤ hi`.
pub fn fit_records(
    records: &[IterationRecord],
    column: impl Fn(&IterationRecord) -> Option<f64>,
    lo: usize,
    hi: usize,
    model: RateModel,
) -> Result<RateFit> {
    let (n, e): (Vec<usize>, Vec<f64>) = records
        .iter()
        .filter(|r| r.iteration >= lo && r.iteration <= hi)
        .filter_map(|r| column(r).map(|e| (r.iteration, e)))
        .unzip();
    fit_rate(&n, &e, model)
}

/// Largest relative increase `(d_N − d_0)/d_0` of the weighted distance
/// over the logged iterations; `None` without a weighted distance.
pub fn descent_monitor(records: &[IterationRecord]) -> Option<f64> {
    let d: Vec<f64> = records.iter().filter_map(|r| r.dist2_weighted).collect();
    let d0 = *d.first()?;
    let scale = if d0 != 0.0 { d0.abs() } else { 1.0 };
    Some(d.iter().map(|v| (v - d0) / scale).fold(f64::NEG_INFINITY, f64::max))
}

/// Inputs of the three-point probe.
#[derive(Debug, Clone)]
pub struct ThreePointParams {
    /// `γ_{K,j}` per primal block.
    pub gamma_k: Vec<f64>,
    pub l3: f64,
    pub p: f64,
    pub theta_a: f64,
    /// Block scaling `A = Σ a_j P_j`, `a_j ≥ 0`.
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreePointReport {
    pub n_samples: usize,
    pub violations: usize,
    /// Smallest left-minus-right value seen.
    pub worst_margin: f64,
}

impl ThreePointReport {
    /// "consistent" when no sample violated the condition; this never proves it.
    pub fn verdict(&self) -> &'static str {
        if self.violations == 0 {
            "consistent"
        } else {
            "violated"
        }
    }
}

fn ball_sample(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    use rand::Rng;
    let d = random_normal(rng, center.len());
    let n = dot(&d, &d).sqrt();
    let r = radius * rng.random::<f64>().powf(1.0 / center.len() as f64);
    center.iter().zip(&d).map(|(c, v)| c + r * v / n).collect()
}

/// Sample pairs `(x, x′)` in the ball of `radius` around `x*` and evaluate
/// the three-point condition on `K` at each pair.
pub fn probe_three_point(
    problem: &dyn Problem,
    xs: &[f64],
    ys: &[f64],
    params: &ThreePointParams,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ThreePointReport> {
    if !(1.0..=2.0).contains(&params.p) {
        return Err(Error::Config(format!("exponent p = {} must lie in [1, 2]", params.p)));
    }
    let pp = problem.primal_partition();
    let m = pp.n_blocks();
    if params.gamma_k.len() != m || params.a.len() != m {
        return Err(Error::Config(format!("three-point constants need {m} primal entries")));
    }
    if params.a.iter().any(|&a| a < 0.0) {
        return Err(Error::Config("block scaling must be non-negative".into()));
    }
    let ny = problem.dual_partition().total_dim();
    let mut g_star = vec![0.0; xs.len()];
    problem.jacobian(xs).apply_adjoint(ys, &mut g_star);
    let mut k_star = vec![0.0; ny];
    problem.k_eval(xs, &mut k_star);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ThreePointReport { n_samples, violations: 0, worst_margin: f64::INFINITY };
    let mut g = vec![0.0; xs.len()];
    let mut kx = vec![0.0; ny];
    let mut lin = vec![0.0; ny];
    for _ in 0..n_samples {
        let x = ball_sample(&mut rng, xs, radius);
        let xp = ball_sample(&mut rng, xs, radius);
        let jac = problem.jacobian(&x);
        jac.apply_adjoint(ys, &mut g);
        let d_star: Vec<f64> = xs.iter().zip(&x).map(|(a, b)| a - b).collect();
        jac.apply(&d_star, &mut lin);
        problem.k_eval(&x, &mut kx);
        let rem2: f64 = (0..ny).map(|i| (k_star[i] - kx[i] - lin[i]).powi(2)).sum();
        let mut lhs = 0.0;
        let mut rhs = params.theta_a * rem2.sqrt().powf(params.p);
        // the remainder cancels terms of this size, so round-off scales with them
        let parts: f64 = (0..ny).map(|i| (k_star[i].abs() + kx[i].abs() + lin[i].abs()).powi(2)).sum();
        let mut scale = params.theta_a * parts.sqrt().powf(params.p);
        for j in 0..m {
            let a = params.a[j];
            let mut inner = 0.0;
            let mut dd = 0.0;
            let mut step = 0.0;
            for i in pp.block(j).iter() {
                let dxs = xp[i] - xs[i];
                inner += (g[i] - g_star[i]) * dxs;
                dd += dxs * dxs;
                step += (xp[i] - x[i]).powi(2);
            }
            lhs += a * inner;
            rhs += a * params.gamma_k[j] * dd - 0.5 * params.l3 * a * step;
            scale += (a * inner).abs() + (a * params.gamma_k[j] * dd).abs() + (0.5 * params.l3 * a * step).abs();
        }
        let margin = lhs - rhs;
        if margin < -1e-12 * scale.max(f64::MIN_POSITIVE) {
            report.violations += 1;
        }
        report.worst_margin = report.worst_margin.min(margin);
    }
    Ok(report)
}

/// Constants that make the three-point condition hold with `p = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreePointConstants {
    pub beta1: f64,
    pub beta2: f64,
    pub theta_a: f64,
    pub l3: f64,
}

/// Grid scan over `(β₁, β₂)` for the smallest `L₃` that still allows
/// `θ_A`, given `γ_x`, the Lipschitz factor `L` of `∇K`, `‖P_NL y*‖` and
/// the block scaling `a`. Returns `None` if no grid point is admissible.
pub fn three_point_constants_scan(gamma_x: f64, l: f64, y_nl_norm: f64, a: &[f64], theta_a: f64) -> Option<ThreePointConstants> {
    let a_min = a.iter().copied().fold(f64::INFINITY, f64::min);
    if !(gamma_x > 0.0 && a_min > 0.0 && theta_a >= 0.0) {
        return None;
    }
    let spread_max = a.iter().map(|&v| v - a_min).fold(0.0, f64::max);
    let spread_sum: f64 = a.iter().map(|&v| v - a_min).sum();
    let mut best: Option<ThreePointConstants> = None;
    for i in 1..200 {
        let beta1 = gamma_x * i as f64 / 200.0;
        for k in -40..=40 {
            let beta2 = 10f64.powf(k as f64 / 10.0);
            if l * theta_a > a_min * (gamma_x - beta1) - beta2 * spread_max {
                continue;
            }
            let l3 = l * l * y_nl_norm * (1.0 / beta1 + spread_sum / (beta2 * a_min)) / 2.0 + 2.0 * l * theta_a;
            if best.as_ref().is_none_or(|b| l3 < b.l3) {
                best = Some(ThreePointConstants { beta1, beta2, theta_a, l3 });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZbarReport {
    /// `z̄_0, …, z̄_N`.
    pub trajectory: Vec<f64>,
    /// `z̄_i ≤ z̄_0 + i/2` at every step.
    pub bound_holds: bool,
    /// Largest `|z̄_{i+1} − (z̄_i² + z̄_i)^{1/2}|`.
    pub max_recursion_error: f64,
}

impl ZbarReport {
    pub fn holds(&self) -> bool {
        self.bound_holds && self.max_recursion_error <= 1e-12 * self.trajectory.last().copied().unwrap_or(1.0).max(1.0)
    }
}

/// Iterate `z_j ← (1 + z_j)/(1 + 1/z̄)^{1/2}` for `n` steps.
pub fn check_zbar_recursion(z0: &[f64], n: usize) -> Result<ZbarReport> {
    if z0.is_empty() || z0.iter().any(|&z| !(z > 0.0 && z.is_finite())) {
        return Err(Error::Config("z⁰ must be non-empty and positive".into()));
    }
    let mut z = z0.to_vec();
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut zbar = max(&z);
    let zbar0 = zbar;
    let mut report = ZbarReport { trajectory: vec![zbar], bound_holds: true, max_recursion_error: 0.0 };
    for i in 1..=n {
        let d = (1.0 + 1.0 / zbar).sqrt();
        z.iter_mut().for_each(|v| *v = (1.0 + *v) / d);
        let next = max(&z);
        let err = (next - (zbar * zbar + zbar).sqrt()).abs();
        report.max_recursion_error = report.max_recursion_error.max(err);
        if next > zbar0 + i as f64 / 2.0 {
            report.bound_holds = false;
        }
        zbar = next;
        report.trajectory.push(zbar);
    }
    Ok(report)
}

/// Exact `κ`-margin of a single-block-pair setup via the spectral norm of
/// the dense Jacobian: `(1 − κ) − τσ‖∇K(x)‖²`.
pub fn exact_kappa_margin(problem: &dyn Problem, x: &[f64], tau: f64, sigma: f64, kappa: f64) -> f64 {
    let j = dense_jacobian(problem, x);
    let s = j.singular_values().max();
    (1.0 - kappa) - tau * sigma * s * s
}
