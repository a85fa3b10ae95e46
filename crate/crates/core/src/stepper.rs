//! Step lengths `τ_j, σ_ℓ`, testing parameters `φ_j, ψ_ℓ`, `η` and the
//! over-relaxation factor `ω̄`, with their update regimes.
//!
//! A [`StepState`] at iteration `i` holds exactly what iteration `i` uses:
//! `τ^i, φ^i, ω̄^i, η^i` and the dual quantities `σ^{i+1}, ψ^{i+1}`. The
//! coupling identities are
//!
//! * full-dual: `π_j φ_j^i τ_j^i = η^i` and `ψ_ℓ^{i+1} σ_ℓ^{i+1} = η^{i+1}`;
//! * full-primal: `φ_j^i τ_j^i = η^{i+1}` and `ν_ℓ ψ_ℓ^{i+1} σ_ℓ^{i+1} = η^i`.

use std::collections::VecDeque;

use crate::blocks::ConnectionGraph;
use crate::problem::NormBounds;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// All dual blocks updated, primal blocks sampled.
    FullDual,
    /// All primal blocks updated, dual blocks sampled.
    FullPrimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Fixed,
    /// `O(1/N)` rules.
    Acc2,
    /// `O(1/N²)` rules.
    Acc,
    /// Linear rules with a frozen `ω̄`.
    Lin,
}

/// User-chosen constants of a step rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConstants {
    pub kappa: f64,
    pub delta: f64,
    /// `γ̃_{G,j}` per primal block.
    pub gamma_tilde_g: Vec<f64>,
    /// Dual growth rate per dual block: `γ̄_{F*,ℓ}` for full-dual rules,
    /// `γ̃_{F*,ℓ}` for full-primal rules.
    pub gamma_dual: Vec<f64>,
}

impl StepConstants {
    pub fn fixed(kappa: f64, m: usize, n: usize) -> Self {
        StepConstants { kappa, delta: kappa, gamma_tilde_g: vec![0.0; m], gamma_dual: vec![0.0; n] }
    }
}

/// Problem-side growth constants bounding the admissible rates.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthLimits {
    /// `γ̄_{GK,j}`.
    pub primal: Vec<f64>,
    /// `γ̄_{F*,ℓ}`.
    pub dual: Vec<f64>,
}

/// `γ̄_{F*,ℓ}` from `γ_{F*,ℓ}`. For blocks touching the non-linear range the
/// reduction by `ζ_ℓ` (and `α_y` in the full-dual family) needs those
/// constants; without them the value is 0.
pub fn bar_gamma_fstar(
    family: Family,
    gamma_fstar: &[f64],
    nl_mask: &[bool],
    p: f64,
    zeta: Option<&[f64]>,
    alpha_y: Option<f64>,
) -> Vec<f64> {
    gamma_fstar
        .iter()
        .zip(nl_mask)
        .enumerate()
        .map(|(l, (&g, &nl))| {
            if !nl {
                return g;
            }
            match (family, zeta, alpha_y) {
                (Family::FullDual, Some(z), Some(a)) => g - (p - 1.0) * z[l] - a,
                (Family::FullPrimal, Some(z), _) => g - (p - 1.0) * z[l],
                _ => 0.0,
            }
        })
        .collect()
}

/// `γ̄_{GK,j} = γ_{G,j} + γ_{K,j}`, less `α_x` in the full-primal family.
pub fn bar_gamma_gk(family: Family, gamma_g: &[f64], gamma_k: &[f64], alpha_x: Option<f64>) -> Vec<f64> {
    let ax = match family {
        Family::FullDual => 0.0,
        Family::FullPrimal => alpha_x.unwrap_or(0.0),
    };
    gamma_g.iter().zip(gamma_k).map(|(g, k)| g + k - ax).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub family: Family,
    pub regime: Regime,
    /// `τ^i`.
    pub tau: Vec<f64>,
    /// `φ^i`.
    pub phi: Vec<f64>,
    /// `σ^{i+1}`.
    pub sigma: Vec<f64>,
    /// `ψ^{i+1}`.
    pub psi: Vec<f64>,
    /// `ω̄^i`.
    pub omega_bar: f64,
    /// `η^i`.
    pub eta: f64,
    /// `η^{i+1}`.
    pub eta_next: f64,
    pub iteration: u64,
    /// `π_j`; all ones in the full-primal family.
    pub primal_probs: Vec<f64>,
    /// `ν_ℓ`; all ones in the full-dual family.
    pub dual_probs: Vec<f64>,
    /// `τ^0`.
    pub tau0: Vec<f64>,
    /// `σ^0` (full-dual) or `σ^1` (full-primal), the values entering the sigma-test.
    pub sigma0: Vec<f64>,
    pub constants: StepConstants,
    /// `η, η_next, φ, ψ` are stored divided by `exp(log_scale)` so that the
    /// geometric growth of the linear regimes cannot overflow.
    pub log_scale: f64,
    frozen_omega: f64,
    warnings: Vec<String>,
}

fn max_inv_sqrt(tau: &[f64], g: &[f64]) -> f64 {
    tau.iter().zip(g).map(|(t, g)| 1.0 / (1.0 + 2.0 * t * g).sqrt()).fold(0.0, f64::max)
}

fn max_inv(v: &[f64], g: &[f64]) -> f64 {
    v.iter().zip(g).map(|(t, g)| 1.0 / (1.0 + 2.0 * t * g)).fold(0.0, f64::max)
}

impl StepState {
    /// Initial state from `τ^0` and the sigma-test output `σ^0` (full-dual)
    /// or `σ^1` (full-primal). `limits` enables the admissibility checks.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        family: Family,
        regime: Regime,
        tau0: Vec<f64>,
        sigma0: Vec<f64>,
        primal_probs: Vec<f64>,
        dual_probs: Vec<f64>,
        constants: StepConstants,
        limits: Option<&GrowthLimits>,
    ) -> Result<Self> {
        let (m, n) = (tau0.len(), sigma0.len());
        if m == 0 || n == 0 {
            return Err(Error::Config("need at least one primal and one dual block".into()));
        }
        if primal_probs.len() != m || dual_probs.len() != n {
            return Err(Error::Config("probability vectors do not match block counts".into()));
        }
        if constants.gamma_tilde_g.len() != m || constants.gamma_dual.len() != n {
            return Err(Error::Config("growth constants do not match block counts".into()));
        }
        if !(0.0 <= constants.delta && constants.delta <= constants.kappa && constants.kappa < 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= delta <= kappa < 1, got delta = {}, kappa = {}",
                constants.delta, constants.kappa
            )));
        }
        for (name, v) in [("tau0", &tau0), ("sigma0", &sigma0)] {
            if let Some(x) = v.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Err(Error::Config(format!("{name} entries must be positive, got {x}")));
            }
        }
        for (name, v) in [("primal", &primal_probs), ("dual", &dual_probs)] {
            if let Some(x) = v.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
                return Err(Error::Config(format!("{name} probabilities must lie in (0, 1], got {x}")));
            }
        }
        match family {
            Family::FullDual if dual_probs.iter().any(|&p| p != 1.0) => {
                return Err(Error::Config("full-dual family updates every dual block".into()))
            }
            Family::FullPrimal if primal_probs.iter().any(|&p| p != 1.0) => {
                return Err(Error::Config("full-primal family updates every primal block".into()))
            }
            _ => {}
        }
        let mut warnings = Vec::new();
        check_admissible(family, regime, &constants, &primal_probs, &dual_probs, limits, &mut warnings)?;
        for w in &warnings {
            log::warn!("{w}");
        }

        let g = &constants.gamma_tilde_g;
        let gd = &constants.gamma_dual;
        let mut st = StepState {
            family,
            regime,
            tau: tau0.clone(),
            phi: vec![0.0; m],
            sigma: sigma0.clone(),
            psi: vec![0.0; n],
            omega_bar: 1.0,
            eta: 1.0,
            eta_next: 1.0,
            iteration: 0,
            primal_probs,
            dual_probs,
            tau0,
            sigma0,
            constants: constants.clone(),
            log_scale: 0.0,
            frozen_omega: 1.0,
            warnings,
        };
        match family {
            Family::FullDual => {
                let omega = match regime {
                    Regime::Fixed | Regime::Acc2 => 1.0,
                    Regime::Acc => max_inv_sqrt(&st.tau, g),
                    Regime::Lin => max_inv(&st.tau, g).max(max_inv(&st.sigma, gd)),
                };
                st.frozen_omega = omega;
                st.omega_bar = omega;
                st.eta_next = st.eta / omega;
                for j in 0..m {
                    st.phi[j] = st.eta / (st.primal_probs[j] * st.tau[j]);
                }
                for l in 0..n {
                    st.psi[l] = st.eta / st.sigma[l];
                }
                st.dual_half_full_dual(omega);
            }
            Family::FullPrimal => {
                let omega = match regime {
                    Regime::Lin => max_inv(&st.tau, g).max(max_inv(&st.sigma, gd)),
                    _ => 1.0,
                };
                st.frozen_omega = omega;
                st.omega_bar = omega;
                st.eta_next = st.eta / omega;
                for j in 0..m {
                    st.phi[j] = st.eta_next / st.tau[j];
                }
                for l in 0..n {
                    st.psi[l] = st.eta / (st.dual_probs[l] * st.sigma[l]);
                }
            }
        }
        Ok(st)
    }

    pub fn n_primal(&self) -> usize {
        self.tau.len()
    }

    pub fn n_dual(&self) -> usize {
        self.sigma.len()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// The frozen `ω̄` of the linear regimes (1 otherwise, except that the
    /// full-dual accelerated regime starts below 1).
    pub fn frozen_omega(&self) -> f64 {
        self.frozen_omega
    }

    // σ^{i+1}, ψ^{i+1} from σ^i, ψ^i with ω̄^i
    fn dual_half_full_dual(&mut self, omega: f64) {
        let gd = &self.constants.gamma_dual;
        for l in 0..self.sigma.len() {
            let s = self.sigma[l];
            let f = 1.0 + 2.0 * s * gd[l];
            match self.regime {
                Regime::Fixed => {}
                Regime::Acc2 => {
                    self.sigma[l] = s / f;
                    self.psi[l] *= f;
                }
                Regime::Acc => self.sigma[l] = s / omega,
                Regime::Lin => {
                    self.sigma[l] = s / (f * omega);
                    self.psi[l] *= f;
                }
            }
        }
    }

    /// Moves the state from iteration `i` to `i + 1`.
    pub fn advance(&mut self) {
        match self.family {
            Family::FullDual => self.advance_full_dual(),
            Family::FullPrimal => self.advance_full_primal(),
        }
        self.iteration += 1;
        self.renormalise();
    }

    fn renormalise(&mut self) {
        const LIMIT: f64 = 1e100;
        let worst = self.phi.iter().chain(&self.psi).chain([&self.eta, &self.eta_next]).fold(0.0f64, |a, b| a.max(*b));
        if worst < LIMIT {
            return;
        }
        let f = self.eta;
        self.eta /= f;
        self.eta_next /= f;
        self.phi.iter_mut().chain(self.psi.iter_mut()).for_each(|v| *v /= f);
        self.log_scale += f.ln();
    }

    /// `exp(log_scale)`, the factor restoring the true `η, φ, ψ`.
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn advance_full_dual(&mut self) {
        let g = &self.constants.gamma_tilde_g;
        let omega = self.omega_bar;
        for j in 0..self.tau.len() {
            let t = self.tau[j];
            let f = 1.0 + 2.0 * t * g[j];
            match self.regime {
                Regime::Fixed => {}
                Regime::Acc2 => {
                    self.tau[j] = t / f;
                    self.phi[j] *= f;
                }
                Regime::Acc | Regime::Lin => {
                    self.tau[j] = t / (f * omega);
                    self.phi[j] *= f;
                }
            }
        }
        self.eta = self.eta_next;
        let next = match self.regime {
            Regime::Fixed | Regime::Acc2 => 1.0,
            Regime::Acc => max_inv_sqrt(&self.tau, g),
            Regime::Lin => self.frozen_omega,
        };
        self.omega_bar = next;
        self.eta_next = self.eta / next;
        self.dual_half_full_dual(next);
    }

    fn advance_full_primal(&mut self) {
        let g = &self.constants.gamma_tilde_g;
        let gd = &self.constants.gamma_dual;
        let old = self.omega_bar;
        let next = match self.regime {
            Regime::Fixed | Regime::Acc2 => 1.0,
            Regime::Acc => max_inv_sqrt(&self.tau, g),
            Regime::Lin => self.frozen_omega,
        };
        for j in 0..self.tau.len() {
            let t = self.tau[j];
            let f = 1.0 + 2.0 * t * g[j];
            match self.regime {
                Regime::Fixed => {}
                Regime::Acc2 => {
                    self.tau[j] = t / f;
                    self.phi[j] *= f;
                }
                Regime::Acc | Regime::Lin => {
                    self.tau[j] = t / (f * next);
                    self.phi[j] *= f;
                }
            }
        }
        for l in 0..self.sigma.len() {
            let s = self.sigma[l];
            let f = 1.0 + 2.0 * s * gd[l];
            match self.regime {
                Regime::Fixed => {}
                Regime::Acc2 => {
                    self.sigma[l] = s / f;
                    self.psi[l] *= f;
                }
                Regime::Acc => self.sigma[l] = s / old,
                Regime::Lin => {
                    self.sigma[l] = s / (f * next);
                    self.psi[l] *= f;
                }
            }
        }
        self.eta = self.eta_next;
        self.omega_bar = next;
        self.eta_next = self.eta / next;
    }

    /// Largest relative deviation from the coupling identities.
    pub fn coupling_residual(&self) -> f64 {
        let (primal_target, dual_target) = match self.family {
            Family::FullDual => (self.eta, self.eta_next),
            Family::FullPrimal => (self.eta_next, self.eta),
        };
        let mut worst: f64 = 0.0;
        for j in 0..self.tau.len() {
            let v = self.primal_probs[j] * self.phi[j] * self.tau[j];
            worst = worst.max((v - primal_target).abs() / primal_target);
        }
        for l in 0..self.sigma.len() {
            let v = self.dual_probs[l] * self.psi[l] * self.sigma[l];
            worst = worst.max((v - dual_target).abs() / dual_target);
        }
        worst
    }

    /// Largest ratio of the relaxed product `ω̄^i σ^{i+1} τ^i` (full-dual) or
    /// `σ^{i+1} τ^i` (full-primal) to its initial value, over block pairs.
    pub fn product_rule_ratio(&self) -> f64 {
        let w = match self.family {
            Family::FullDual => self.omega_bar,
            Family::FullPrimal => 1.0,
        };
        let mut worst: f64 = 0.0;
        for (t, t0) in self.tau.iter().zip(&self.tau0) {
            for (s, s0) in self.sigma.iter().zip(&self.sigma0) {
                worst = worst.max(w * s * t / (s0 * t0));
            }
        }
        worst
    }

    /// Scales `σ_ℓ` by `factors[ℓ]` and `ψ_ℓ` by its inverse, keeping the coupling.
    pub fn rescale_dual(&mut self, factors: &[f64]) {
        for l in 0..self.sigma.len() {
            self.sigma[l] *= factors[l];
            self.psi[l] /= factors[l];
            self.sigma0[l] *= factors[l];
        }
    }
}

fn check_admissible(
    family: Family,
    regime: Regime,
    c: &StepConstants,
    pi: &[f64],
    nu: &[f64],
    limits: Option<&GrowthLimits>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    if c.gamma_tilde_g.iter().chain(&c.gamma_dual).any(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(Error::Config("growth constants must be finite and non-negative".into()));
    }
    if regime == Regime::Fixed {
        if c.gamma_tilde_g.iter().chain(&c.gamma_dual).any(|&g| g > 0.0) {
            warnings.push("fixed regime ignores the configured acceleration constants".into());
        }
        return Ok(());
    }
    let need_primal_growth = matches!(regime, Regime::Acc | Regime::Lin);
    if need_primal_growth {
        if let Some(j) = c.gamma_tilde_g.iter().position(|&g| g == 0.0) {
            return Err(Error::Config(format!(
                "regime {regime:?} needs gamma_tilde_g > 0 on every primal block, block {j} is 0"
            )));
        }
    }
    let need_dual_growth = regime == Regime::Lin;
    if need_dual_growth {
        if let Some(l) = c.gamma_dual.iter().position(|&g| g == 0.0) {
            return Err(Error::Config(format!(
                "regime Lin needs a positive dual growth rate on every dual block, block {l} is 0"
            )));
        }
    }
    let Some(lim) = limits else { return Ok(()) };
    if lim.primal.len() != pi.len() || lim.dual.len() != nu.len() {
        return Err(Error::Config("growth limits do not match block counts".into()));
    }
    for (j, (&g, &gk)) in c.gamma_tilde_g.iter().zip(&lim.primal).enumerate() {
        let bound = match family {
            Family::FullDual => pi[j] * gk,
            Family::FullPrimal => gk,
        };
        let ok = g < bound || (g == 0.0 && gk >= 0.0);
        if !ok {
            return Err(Error::Config(format!(
                "gamma_tilde_g[{j}] = {g} must be below {bound} for regime {regime:?}"
            )));
        }
    }
    for (l, (&g, &gb)) in c.gamma_dual.iter().zip(&lim.dual).enumerate() {
        match family {
            Family::FullDual => {
                if g > gb {
                    return Err(Error::Config(format!(
                        "dual rate {g} of block {l} exceeds its bound {gb}"
                    )));
                }
            }
            Family::FullPrimal => {
                if regime == Regime::Acc {
                    continue;
                }
                let ok = g < nu[l] * gb || (g == 0.0 && gb >= 0.0);
                if !ok {
                    return Err(Error::Config(format!(
                        "gamma_tilde_fstar[{l}] = {g} must be below {}",
                        nu[l] * gb
                    )));
                }
            }
        }
    }
    Ok(())
}

fn sigma_test_terms(
    l: usize,
    tau: &[f64],
    graph: &ConnectionGraph,
    norms: &NormBounds,
    family: Family,
    primal_probs: &[f64],
    dual_probs: &[f64],
) -> (f64, f64) {
    // (R_ℓ² max_j c_j, Σ_j c_j R_{ℓ,j}²) with c_j = w_{j,ℓ} τ_j / π_j or / ν_ℓ
    let mut max_c: f64 = 0.0;
    let mut sum = 0.0;
    for j in graph.primal_neighbors(l) {
        let p = match family {
            Family::FullDual => primal_probs[j],
            Family::FullPrimal => dual_probs[l],
        };
        let c = graph.block_weight_sum(j, l) * tau[j] / p;
        max_c = max_c.max(c);
        let r = norms.pair(l, j);
        sum += c * r * r;
    }
    (norms.per_dual[l].powi(2) * max_c, sum)
}

fn sigma_test_bound(
    l: usize,
    tau: &[f64],
    graph: &ConnectionGraph,
    norms: &NormBounds,
    family: Family,
    primal_probs: &[f64],
    dual_probs: &[f64],
) -> f64 {
    let (a, b) = sigma_test_terms(l, tau, graph, norms, family, primal_probs, dual_probs);
    a.min(b)
}

/// Initial dual steps (`σ^0` full-dual, `σ^1` full-primal) meeting the
/// sigma-test with margin `κ`, using the bound
/// `‖Σ_j √c_j Q_ℓ∇K P_j‖² ≤ min(R_ℓ² max_j c_j, Σ_j c_j R_{ℓ,j}²)`.
pub fn init_dual_steps_from_weights(
    tau0: &[f64],
    graph: &ConnectionGraph,
    norms: &NormBounds,
    kappa: f64,
    family: Family,
    primal_probs: &[f64],
    dual_probs: &[f64],
) -> Result<Vec<f64>> {
    let n = graph.n_dual();
    if norms.per_dual.len() != n || dual_probs.len() != n || primal_probs.len() != graph.n_primal() {
        return Err(Error::Config("norm bounds or probabilities do not match the graph".into()));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::Config(format!("kappa = {kappa} must lie in [0, 1)")));
    }
    let mut sigma = vec![f64::NAN; n];
    for (l, s) in sigma.iter_mut().enumerate() {
        if graph.primal_neighbors(l).is_empty() {
            continue;
        }
        let b = sigma_test_bound(l, tau0, graph, norms, family, primal_probs, dual_probs);
        if !(b > 0.0) {
            return Err(Error::Config(format!("dual block {l} is connected but has a zero norm bound")));
        }
        *s = (1.0 - kappa) / b;
    }
    let fill = sigma.iter().copied().filter(|s| !s.is_nan()).fold(f64::NAN, f64::max);
    let fill = if fill.is_nan() { 1.0 } else { fill };
    for s in &mut sigma {
        if s.is_nan() {
            *s = fill;
        }
    }
    Ok(sigma)
}

/// `(1 − κ) − max_ℓ` of the sigma-test bound at `σ^0, τ^0`. Negative values
/// mean the test fails for the given norm bounds.
pub fn kappa_margin(state: &StepState, graph: &ConnectionGraph, norms: &NormBounds) -> f64 {
    let mut worst: f64 = 0.0;
    for l in 0..state.n_dual() {
        let b = sigma_test_bound(
            l,
            &state.tau0,
            graph,
            norms,
            state.family,
            &state.primal_probs,
            &state.dual_probs,
        );
        worst = worst.max(b * state.sigma0[l]);
    }
    (1.0 - state.constants.kappa) - worst
}

/// Inflated maximum of recent per-block norm observations.
#[derive(Debug, Clone)]
pub struct TrailingNormEstimator {
    window: usize,
    inflation: f64,
    history: VecDeque<Vec<f64>>,
}

impl Default for TrailingNormEstimator {
    fn default() -> Self {
        Self::new(100, 1.05)
    }
}

impl TrailingNormEstimator {
    pub fn new(window: usize, inflation: f64) -> Self {
        TrailingNormEstimator { window: window.max(1), inflation, history: VecDeque::new() }
    }

    pub fn observe(&mut self, norms: &[f64]) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(norms.to_vec());
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Per-block `inflation · max` over the window; empty before any observation.
    pub fn estimate(&self) -> Vec<f64> {
        let Some(first) = self.history.front() else { return vec![] };
        let mut out = first.clone();
        for h in self.history.iter().skip(1) {
            for (o, v) in out.iter_mut().zip(h) {
                *o = o.max(*v);
            }
        }
        out.iter_mut().for_each(|o| *o *= self.inflation);
        out
    }
}
