//! The problem contract consumed by the solvers, common proximal maps and
//! numerical checks of user-supplied operators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{BlockPartition, ConnectionGraph};
use crate::{Error, Result};

/// Action of `∇K(x)` and its adjoint at a fixed point `x`.
pub trait LinearMap {
    /// `dy = ∇K(x) dx`, overwriting `dy`.
    fn apply(&self, dx: &[f64], dy: &mut [f64]);
    /// `dx = ∇K(x)* dy`, overwriting `dx`.
    fn apply_adjoint(&self, dy: &[f64], dx: &mut [f64]);
}

/// Upper bounds on blocks of `∇K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBounds {
    /// `R_ℓ ≥ ‖Q_ℓ ∇K(x)‖`.
    pub per_dual: Vec<f64>,
    /// Optional `R_{ℓ,j} ≥ ‖Q_ℓ ∇K(x) P_j‖`, listed per dual block as `(j, R_{ℓ,j})`.
    pub per_pair: Option<Vec<Vec<(usize, f64)>>>,
    /// Bound on the whole Jacobian.
    pub global: f64,
    /// False when a power iteration stopped before converging.
    pub converged: bool,
}

impl NormBounds {
    pub fn from_per_dual(per_dual: Vec<f64>) -> Self {
        let global = per_dual.iter().map(|r| r * r).sum::<f64>().sqrt();
        NormBounds { per_dual, per_pair: None, global, converged: true }
    }

    /// `R_{ℓ,j}` if known, else `R_ℓ`.
    pub fn pair(&self, l: usize, j: usize) -> f64 {
        if let Some(pp) = &self.per_pair {
            if let Some(&(_, r)) = pp[l].iter().find(|(jj, _)| *jj == j) {
                return r;
            }
            return 0.0;
        }
        self.per_dual[l]
    }
}

/// `min_x G(x) + F(K(x))` with `G = Σ_j G_j ∘ P_j` and `F* = Σ_ℓ F*_ℓ ∘ Q_ℓ`.
///
/// Proximal maps act in place on the full vector and must only touch the
/// coordinates of their block.
pub trait Problem: Send + Sync {
    fn primal_partition(&self) -> &BlockPartition;
    fn dual_partition(&self) -> &BlockPartition;

    /// `(I + τ ∂G_j)^{-1}` applied to block `j` of `x`.
    fn prox_g(&self, j: usize, tau: f64, x: &mut [f64]);
    /// `(I + σ ∂F*_ℓ)^{-1}` applied to block `ℓ` of `y`.
    fn prox_fstar(&self, l: usize, sigma: f64, y: &mut [f64]);

    fn k_eval(&self, x: &[f64], out: &mut [f64]);

    /// Writes blocks `blocks` of `K(x)` into `out`; other entries are unspecified.
    fn k_eval_blocks(&self, x: &[f64], blocks: &[usize], out: &mut [f64]) {
        let mut full = vec![0.0; out.len()];
        self.k_eval(x, &mut full);
        let dp = self.dual_partition();
        for &l in blocks {
            for i in dp.block(l).iter() {
                out[i] = full[i];
            }
        }
    }

    fn jacobian<'a>(&'a self, x: &[f64]) -> Box<dyn LinearMap + 'a>;

    /// `G(x) + F(K(x))`.
    fn objective(&self, x: &[f64]) -> f64;

    fn gamma_g(&self) -> Vec<f64> {
        vec![0.0; self.primal_partition().n_blocks()]
    }

    fn gamma_fstar(&self) -> Vec<f64> {
        vec![0.0; self.dual_partition().n_blocks()]
    }

    fn gamma_k(&self) -> Vec<f64> {
        vec![0.0; self.primal_partition().n_blocks()]
    }

    /// Lipschitz factor of `∇K`, when known.
    fn lipschitz(&self) -> Option<f64> {
        None
    }

    /// True for dual blocks touching the range where `y ↦ ⟨y, K(x)⟩` is non-linear.
    fn nl_mask(&self) -> Vec<bool> {
        vec![true; self.dual_partition().n_blocks()]
    }

    /// Analytic norm bounds at `x`, if the problem has them.
    fn norm_bounds(&self, _x: &[f64]) -> Option<NormBounds> {
        None
    }

    fn connection_graph(&self) -> Option<ConnectionGraph> {
        None
    }

    /// Known saddle point `(x*, y*)`.
    fn solution(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    fn initial_point(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![0.0; self.primal_partition().total_dim()],
            vec![0.0; self.dual_partition().total_dim()],
        )
    }
}

/// Prox of `(scale/2)‖·‖²`: `v / (1 + σ scale)`.
pub fn prox_l2_squared(sigma: f64, scale: f64, v: &mut [f64]) {
    let f = 1.0 / (1.0 + sigma * scale);
    for a in v {
        *a *= f;
    }
}

/// Prox of `δ_{αB} + (γ/α)‖·‖²` on consecutive sub-vectors of length
/// `sub_dim`: shrink by `1/(1 + 2σγ/α)`, then project onto the ball of radius `α`.
pub fn prox_ball_indicator(sigma: f64, alpha: f64, gamma: f64, sub_dim: usize, v: &mut [f64]) {
    let shrink = 1.0 / (1.0 + 2.0 * sigma * gamma / alpha);
    for chunk in v.chunks_mut(sub_dim) {
        let nrm = chunk.iter().map(|a| a * a).sum::<f64>().sqrt() * shrink;
        let f = if nrm > alpha { shrink * alpha / nrm } else { shrink };
        for a in chunk.iter_mut() {
            *a *= f;
        }
    }
}

/// Prox of `(γ/2)‖· − c‖²`.
pub fn prox_shifted_quadratic(tau: f64, gamma: f64, center: &[f64], v: &mut [f64]) {
    let d = 1.0 / (1.0 + tau * gamma);
    for (a, c) in v.iter_mut().zip(center) {
        *a = (*a + tau * gamma * c) * d;
    }
}

/// Prox of `(γ/2)‖·‖² + ⟨b, ·⟩`.
pub fn prox_quadratic_linear(sigma: f64, gamma: f64, b: &[f64], v: &mut [f64]) {
    let d = 1.0 / (1.0 + sigma * gamma);
    for (a, bb) in v.iter_mut().zip(b) {
        *a = (*a - sigma * bb) * d;
    }
}

pub(crate) fn random_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Max relative error of central differences of `K` against `∇K(x)` along
/// random directions.
pub fn check_jacobian_fd(
    problem: &dyn Problem,
    x: &[f64],
    n_probes: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Diagnostic(format!("finite-difference step {h} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ny = problem.dual_partition().total_dim();
    let jac = problem.jacobian(x);
    let (mut kp, mut km, mut jd) = (vec![0.0; ny], vec![0.0; ny], vec![0.0; ny]);
    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let mut d = random_normal(&mut rng, x.len());
        let nd = norm(&d);
        d.iter_mut().for_each(|a| *a /= nd);
        let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        problem.k_eval(&xp, &mut kp);
        problem.k_eval(&xm, &mut km);
        if kp.iter().chain(&km).any(|v| !v.is_finite()) {
            return Err(Error::Diagnostic("non-finite K value in finite-difference probe".into()));
        }
        jac.apply(&d, &mut jd);
        let diff: f64 = kp
            .iter()
            .zip(&km)
            .zip(&jd)
            .map(|((p, m), j)| {
                let e = (p - m) / (2.0 * h) - j;
                e * e
            })
            .sum::<f64>()
            .sqrt();
        let scale = norm(&jd);
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Max of `|⟨J dx, dy⟩ − ⟨dx, J* dy⟩| / (1 + |⟨J dx, dy⟩|)` over random probes.
pub fn check_adjoint(problem: &dyn Problem, x: &[f64], n_probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = problem.primal_partition().total_dim();
    let ny = problem.dual_partition().total_dim();
    let jac = problem.jacobian(x);
    let (mut jdx, mut jtdy) = (vec![0.0; ny], vec![0.0; nx]);
    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let dx = random_normal(&mut rng, nx);
        let dy = random_normal(&mut rng, ny);
        jac.apply(&dx, &mut jdx);
        jac.apply_adjoint(&dy, &mut jtdy);
        let a = dot(&jdx, &dy);
        let b = dot(&dx, &jtdy);
        worst = worst.max((a - b).abs() / (1.0 + a.abs()));
    }
    worst
}

/// Largest singular value of a map given its normal operator `v ↦ A*A v`.
/// Returns the estimate and whether the relative change fell below `tol`.
pub fn power_iteration(
    dim: usize,
    mut normal_op: impl FnMut(&[f64], &mut [f64]),
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = random_normal(&mut rng, dim);
    let n0 = norm(&v);
    v.iter_mut().for_each(|a| *a /= n0);
    let mut w = vec![0.0; dim];
    let mut est = 0.0;
    for _ in 0..max_iter {
        normal_op(&v, &mut w);
        let lam = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            return (0.0, true);
        }
        v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / nw);
        let new = lam.max(0.0).sqrt();
        if (new - est).abs() <= tol * new {
            return (new, true);
        }
        est = new;
    }
    (est, false)
}

/// Per-dual-block bounds `R_ℓ` at `x0`: analytic when the problem provides
/// them, else power iteration on `∇K(x0)* Q_ℓ ∇K(x0)` (500 steps).
pub fn estimate_norms_static(problem: &dyn Problem, x0: &[f64]) -> NormBounds {
    if let Some(b) = problem.norm_bounds(x0) {
        return b;
    }
    let pp = problem.primal_partition();
    let dp = problem.dual_partition();
    let jac = problem.jacobian(x0);
    let mut per_dual = Vec::with_capacity(dp.n_blocks());
    let mut converged = true;
    let mut tmp = vec![0.0; dp.total_dim()];
    for l in 0..dp.n_blocks() {
        let (r, ok) = power_iteration(
            pp.total_dim(),
            |v, out| {
                jac.apply(v, &mut tmp);
                let restricted = dp.restrict(l, &tmp);
                jac.apply_adjoint(&restricted, out);
            },
            500,
            1e-12,
            l as u64,
        );
        converged &= ok;
        per_dual.push(r);
    }
    let mut b = NormBounds::from_per_dual(per_dual);
    b.converged = converged;
    b
}
