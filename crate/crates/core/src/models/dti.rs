//! Diffusion tensor imaging with total deformation regularisation:
//! `min_x ½‖T(x)‖² + α‖E_d x‖_{F,1}` with the Stejskal–Tanner residual
//! `[T(x)]_k(ξ) = s_k(ξ) − s₀(ξ) exp(−⟨x(ξ) b_k, b_k⟩)`.
//!
//! Tensors are stored per voxel as `(x11, x22, x33, √2x12, √2x13, √2x23)` and
//! symmetric third-order tensors as their 10 unique entries scaled by the
//! square root of their multiplicity, so that Euclidean norms of the storage
//! equal Frobenius norms. Voxels are numbered row-major, the last axis fastest.

use std::f64::consts::SQRT_2;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocks::{BlockPartition, ConnectionGraph};
use crate::problem::{prox_ball_indicator, LinearMap, NormBounds, Problem};
use crate::sampling::SamplingPlan;
use crate::stepper::{init_dual_steps_from_weights, Family, Regime, StepConstants, StepState};
use crate::{Error, Result};

pub const TENSOR_DIM: usize = 6;
pub const SYM3_DIM: usize = 10;
/// Moreau–Yosida parameter of the regulariser's conjugate.
pub const MOREAU_YOSIDA_GAMMA: f64 = 1e-9;
/// Largest exponent passed to `exp` in the forward model.
pub const EXP_CLAMP: f64 = 700.0;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// The six diffusion gradients `b_1 … b_6`.
pub fn default_gradients() -> Vec<[f64; 3]> {
    vec![
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [SQRT_2, SQRT_2, 0.0],
        [SQRT_2, 0.0, SQRT_2],
        [0.0, SQRT_2, SQRT_2],
    ]
}

/// `B` with `⟨x b, b⟩ = B · x` in tensor storage.
pub fn gradient_form(b: &[f64; 3]) -> [f64; 6] {
    [
        b[0] * b[0],
        b[1] * b[1],
        b[2] * b[2],
        SQRT_2 * b[0] * b[1],
        SQRT_2 * b[0] * b[2],
        SQRT_2 * b[1] * b[2],
    ]
}

fn to_matrix(v: &[f64]) -> [[f64; 3]; 3] {
    let (a, b, c) = (v[3] / SQRT_2, v[4] / SQRT_2, v[5] / SQRT_2);
    [[v[0], a, b], [a, v[1], c], [b, c, v[2]]]
}

fn from_matrix(m: &[[f64; 3]; 3]) -> [f64; 6] {
    [m[0][0], m[1][1], m[2][2], SQRT_2 * m[0][1], SQRT_2 * m[0][2], SQRT_2 * m[1][2]]
}

const SYM3_INDEX: [[usize; 3]; 10] = [
    [0, 0, 0],
    [1, 1, 1],
    [2, 2, 2],
    [0, 0, 1],
    [0, 0, 2],
    [0, 1, 1],
    [1, 1, 2],
    [0, 2, 2],
    [1, 2, 2],
    [0, 1, 2],
];

fn sym3_weight(i: usize) -> f64 {
    match i {
        0..=2 => 1.0,
        3..=8 => 3f64.sqrt(),
        _ => 6f64.sqrt(),
    }
}

/// Grid shape with row-major voxel numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub dims: [usize; 3],
}

impl Grid {
    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.dims[1] * self.dims[2],
            1 => self.dims[2],
            _ => 1,
        }
    }

    fn coords(&self, v: usize) -> [usize; 3] {
        let k = v % self.dims[2];
        let j = (v / self.dims[2]) % self.dims[1];
        let i = v / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    /// Symmetrised forward-difference gradient of a tensor field; the
    /// difference is zero at the far face of each axis.
    pub fn symgrad(&self, x: &[f64], out: &mut [f64]) {
        for v in 0..self.n_voxels() {
            let c = self.coords(v);
            let mut d = [[[0.0; 3]; 3]; 3];
            for (axis, dm) in d.iter_mut().enumerate() {
                if c[axis] + 1 < self.dims[axis] {
                    let w = v + self.stride(axis);
                    let diff: Vec<f64> =
                        (0..6).map(|t| x[6 * w + t] - x[6 * v + t]).collect();
                    *dm = to_matrix(&diff);
                }
            }
            let o = &mut out[SYM3_DIM * v..SYM3_DIM * (v + 1)];
            for (slot, &[a, b, cc]) in SYM3_INDEX.iter().enumerate() {
                let s = (d[cc][a][b] + d[a][b][cc] + d[b][cc][a]) / 3.0;
                o[slot] = s * sym3_weight(slot);
            }
        }
    }

    /// Adjoint of [`symgrad`](Self::symgrad).
    pub fn symgrad_adjoint(&self, mu: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|a| *a = 0.0);
        for v in 0..self.n_voxels() {
            let c = self.coords(v);
            let m = &mu[SYM3_DIM * v..SYM3_DIM * (v + 1)];
            let mut s = [[[0.0; 3]; 3]; 3];
            for (slot, &[a, b, cc]) in SYM3_INDEX.iter().enumerate() {
                let val = m[slot] / sym3_weight(slot);
                for p in permutations(a, b, cc) {
                    s[p[0]][p[1]][p[2]] = val;
                }
            }
            for axis in 0..3 {
                if c[axis] + 1 >= self.dims[axis] {
                    continue;
                }
                let mut t = [[0.0; 3]; 3];
                for (a, row) in t.iter_mut().enumerate() {
                    for (b, e) in row.iter_mut().enumerate() {
                        *e = s[a][b][axis];
                    }
                }
                let w = from_matrix(&t);
                let next = v + self.stride(axis);
                for k in 0..6 {
                    out[6 * next + k] += w[k];
                    out[6 * v + k] -= w[k];
                }
            }
        }
    }
}

fn permutations(a: usize, b: usize, c: usize) -> [[usize; 3]; 6] {
    [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]
}

/// Measurements and (for synthetic data) the generating tensor field.
#[derive(Debug, Clone, PartialEq)]
pub struct DtiData {
    pub grid: Grid,
    pub gradients: Vec<[f64; 3]>,
    /// `s₀(ξ)`.
    pub s0: Vec<f64>,
    /// `s_k(ξ)` at index `ξ·N + k`.
    pub s: Vec<f64>,
    pub x_true: Option<Vec<f64>>,
}

impl DtiData {
    /// Helical anisotropic tube in an isotropic background. Inside the tube
    /// the tensor has eigenvalue 1 along the helix tangent and 0.2 across it;
    /// the background is `0.1 I`. `s₀` is the Frobenius norm of the true
    /// tensor and Gaussian noise of deviation `noise_fraction · mean|s₀|` is
    /// added to every `s_k`.
    pub fn synthetic(dims: [usize; 3], noise_fraction: f64, seed: u64) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Config(format!("every grid dimension must be at least 2, got {dims:?}")));
        }
        if !(noise_fraction >= 0.0 && noise_fraction.is_finite()) {
            return Err(Error::Config(format!("noise fraction {noise_fraction} must be non-negative")));
        }
        let grid = Grid { dims };
        let nv = grid.n_voxels();
        let [n1, n2, n3] = dims.map(|d| d as f64);
        let (c1, c2) = ((n1 - 1.0) / 2.0, (n2 - 1.0) / 2.0);
        let rho = 0.3 * n1.min(n2);
        let tube = (0.15 * n1.min(n2).min(n3)).max(1.0);
        let two_pi = 2.0 * std::f64::consts::PI;
        let samples = 1024;
        let curve: Vec<([f64; 3], [f64; 3])> = (0..=samples)
            .map(|s| {
                let t = s as f64 / samples as f64;
                let (sn, cs) = (two_pi * t).sin_cos();
                let p = [c1 + rho * cs, c2 + rho * sn, t * (n3 - 1.0)];
                let d = [-two_pi * rho * sn, two_pi * rho * cs, n3 - 1.0];
                let l = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                (p, [d[0] / l, d[1] / l, d[2] / l])
            })
            .collect();
        let mut x_true = vec![0.0; TENSOR_DIM * nv];
        for v in 0..nv {
            let c = grid.coords(v).map(|a| a as f64);
            let (dist, u) = curve
                .iter()
                .map(|(p, u)| {
                    let d2 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
                    (d2, *u)
                })
                .fold((f64::INFINITY, [0.0; 3]), |best, cur| if cur.0 < best.0 { cur } else { best });
            let mut m = [[0.0; 3]; 3];
            if dist.sqrt() <= tube {
                for a in 0..3 {
                    for b in 0..3 {
                        m[a][b] = 0.8 * u[a] * u[b] + if a == b { 0.2 } else { 0.0 };
                    }
                }
            } else {
                for (a, row) in m.iter_mut().enumerate() {
                    row[a] = 0.1;
                }
            }
            x_true[TENSOR_DIM * v..TENSOR_DIM * (v + 1)].copy_from_slice(&from_matrix(&m));
        }
        let gradients = default_gradients();
        let forms: Vec<[f64; 6]> = gradients.iter().map(gradient_form).collect();
        let s0: Vec<f64> = (0..nv)
            .map(|v| x_true[6 * v..6 * v + 6].iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let mean_s0 = s0.iter().map(|a| a.abs()).sum::<f64>() / nv as f64;
        let sd = noise_fraction * mean_s0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let n = gradients.len();
        let mut s = vec![0.0; n * nv];
        for v in 0..nv {
            for (k, f) in forms.iter().enumerate() {
                let q: f64 = f.iter().zip(&x_true[6 * v..6 * v + 6]).map(|(a, b)| a * b).sum();
                let e: f64 = normal.sample(&mut rng);
                s[v * n + k] = s0[v] * (-q).exp() + sd * e;
            }
        }
        Ok(DtiData { grid, gradients, s0, s, x_true: Some(x_true) })
    }

    pub fn n_gradients(&self) -> usize {
        self.gradients.len()
    }

    /// Same data with the gradient directions reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_gradients();
        let mut out = self.clone();
        out.gradients = perm.iter().map(|&p| self.gradients[p]).collect();
        for v in 0..self.grid.n_voxels() {
            for (k, &p) in perm.iter().enumerate() {
                out.s[v * n + k] = self.s[v * n + p];
            }
        }
        out
    }
}

/// Block structures of the DTI experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtiSetup {
    /// One primal and one dual block.
    D1,
    /// One primal block, dual blocks `μ` and `λ`.
    D2,
    /// One primal block, dual `μ` and one block per measurement `λ_{k,ξ}`.
    D3,
    /// Voxelwise primal blocks, dual blocks as in `D3`.
    D4,
}

impl std::str::FromStr for DtiSetup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d1" => Ok(DtiSetup::D1),
            "d2" => Ok(DtiSetup::D2),
            "d3" => Ok(DtiSetup::D3),
            "d4" => Ok(DtiSetup::D4),
            other => Err(Error::Config(format!("unknown DTI block setup '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DtiProblem {
    pub data: DtiData,
    pub alpha: f64,
    pub setup: DtiSetup,
    forms: Vec<[f64; 6]>,
    primal: BlockPartition,
    dual: BlockPartition,
    /// `r_{k,ξ} = |s₀(ξ)| ‖b_k‖²` at index `ξ·N + k`.
    r_static: Vec<f64>,
    graph: ConnectionGraph,
}

pub struct DtiJacobian<'a> {
    problem: &'a DtiProblem,
    /// `s₀(ξ) exp(−⟨x(ξ) b_k, b_k⟩)` at index `ξ·N + k`.
    scale: Vec<f64>,
}

impl LinearMap for DtiJacobian<'_> {
    fn apply(&self, dx: &[f64], dy: &mut [f64]) {
        let p = self.problem;
        let nv = p.data.grid.n_voxels();
        let n = p.forms.len();
        let (mu, lam) = dy.split_at_mut(SYM3_DIM * nv);
        p.data.grid.symgrad(dx, mu);
        for v in 0..nv {
            let xv = &dx[6 * v..6 * v + 6];
            for (k, f) in p.forms.iter().enumerate() {
                let q: f64 = f.iter().zip(xv).map(|(a, b)| a * b).sum();
                lam[v * n + k] = self.scale[v * n + k] * q;
            }
        }
    }

    fn apply_adjoint(&self, dy: &[f64], dx: &mut [f64]) {
        let p = self.problem;
        let nv = p.data.grid.n_voxels();
        let n = p.forms.len();
        let (mu, lam) = dy.split_at(SYM3_DIM * nv);
        p.data.grid.symgrad_adjoint(mu, dx);
        for v in 0..nv {
            for (k, f) in p.forms.iter().enumerate() {
                let w = self.scale[v * n + k] * lam[v * n + k];
                for t in 0..6 {
                    dx[6 * v + t] += w * f[t];
                }
            }
        }
    }
}

impl DtiProblem {
    pub fn new(data: DtiData, alpha: f64, setup: DtiSetup) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha = {alpha} must be positive")));
        }
        let nv = data.grid.n_voxels();
        let n = data.n_gradients();
        if n == 0 || data.s0.len() != nv || data.s.len() != n * nv {
            return Err(Error::Structure("DTI data sizes disagree with the grid".into()));
        }
        let forms: Vec<[f64; 6]> = data.gradients.iter().map(gradient_form).collect();
        let r_static: Vec<f64> = (0..nv)
            .flat_map(|v| {
                let s0 = data.s0[v].abs();
                data.gradients.iter().map(move |b| s0 * (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]))
            })
            .collect();
        let nx = TENSOR_DIM * nv;
        let (nmu, nlam) = (SYM3_DIM * nv, n * nv);
        let primal = match setup {
            DtiSetup::D4 => BlockPartition::from_sizes(&vec![TENSOR_DIM; nv])?,
            _ => BlockPartition::single(nx)?,
        };
        let dual = match setup {
            DtiSetup::D1 => BlockPartition::single(nmu + nlam)?,
            DtiSetup::D2 => BlockPartition::from_sizes(&[nmu, nlam])?,
            DtiSetup::D3 | DtiSetup::D4 => {
                let mut sizes = vec![1; 1 + nlam];
                sizes[0] = nmu;
                BlockPartition::from_sizes(&sizes)?
            }
        };
        let mut p = DtiProblem {
            data,
            alpha,
            setup,
            forms,
            primal,
            dual,
            r_static,
            graph: ConnectionGraph::new(1, 1),
        };
        p.graph = p.build_graph()?;
        Ok(p)
    }

    pub fn grid(&self) -> Grid {
        self.data.grid
    }

    pub fn n_voxels(&self) -> usize {
        self.data.grid.n_voxels()
    }

    /// `R_E = √12`.
    pub fn r_e() -> f64 {
        12f64.sqrt()
    }

    /// `r_{k,ξ}` at the static estimate (index `ξ·N + k`).
    pub fn r_static(&self) -> &[f64] {
        &self.r_static
    }

    /// `R_T = (Σ r_{k,ξ}²)^{1/2}`.
    pub fn r_t(&self) -> f64 {
        self.r_static.iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    /// `R = (R_E² + R_T²)^{1/2}`.
    pub fn r_total(&self) -> f64 {
        (12.0 + self.r_t().powi(2)).sqrt()
    }

    fn lambda_block(&self, v: usize, k: usize) -> usize {
        1 + v * self.data.n_gradients() + k
    }

    fn build_graph(&self) -> Result<ConnectionGraph> {
        let nv = self.n_voxels();
        let n = self.data.n_gradients();
        let r_e = Self::r_e();
        let r = self.r_total();
        match self.setup {
            DtiSetup::D1 => Ok(ConnectionGraph::fully_connected(1, 1)),
            DtiSetup::D2 => {
                let mut g = ConnectionGraph::fully_connected(1, 2);
                g.set_weight(0, 1, 0, r_e / (r - r_e))?;
                Ok(g)
            }
            DtiSetup::D3 => {
                let nd = 1 + n * nv;
                let mut g = ConnectionGraph::new(1, nd);
                for l in 0..nd {
                    g.connect(0, l)?;
                }
                let all: Vec<usize> = (0..nd).collect();
                g.set_sim(0, 0, &all)?;
                let sum_r: f64 = self.r_static.iter().sum();
                for v in 0..nv {
                    let mut ks: Vec<usize> = (0..n).map(|k| self.lambda_block(v, k)).collect();
                    ks.push(0);
                    for k in 0..n {
                        let l = self.lambda_block(v, k);
                        g.set_sim(0, l, &ks)?;
                        let w = sum_r * r_e / ((r - r_e) * self.r_static[v * n + k]);
                        g.set_weight(0, l, 0, w)?;
                    }
                }
                Ok(g)
            }
            DtiSetup::D4 => {
                let nd = 1 + n * nv;
                let mut g = ConnectionGraph::new(nv, nd);
                for v in 0..nv {
                    let mut ks: Vec<usize> = (0..n).map(|k| self.lambda_block(v, k)).collect();
                    g.connect(v, 0)?;
                    for &l in &ks {
                        g.connect(v, l)?;
                    }
                    ks.push(0);
                    g.set_sim(v, 0, &ks)?;
                    for k in 0..n {
                        let l = self.lambda_block(v, k);
                        g.set_sim(v, l, &ks)?;
                        g.set_weight(v, 0, l, self.r_static[v * n + k])?;
                    }
                }
                Ok(g)
            }
        }
    }

    /// `r_{k,ξ}(x) = |s₀(ξ)| ‖b_k‖² exp(−⟨x(ξ) b_k, b_k⟩)`, the norm of
    /// `Q_{λ_{k,ξ}} ∇K(x)`.
    pub fn r_at(&self, x: &[f64]) -> Vec<f64> {
        let n = self.data.n_gradients();
        (0..self.n_voxels())
            .flat_map(|v| {
                (0..n).map(move |k| {
                    let q: f64 = self.forms[k].iter().zip(&x[6 * v..6 * v + 6]).map(|(a, b)| a * b).sum();
                    self.r_static[v * n + k] * clamp_exp(-q)
                })
            })
            .collect()
    }

    fn bounds_from(&self, r: &[f64]) -> NormBounds {
        let r_e = Self::r_e();
        let r_t = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n = self.data.n_gradients();
        let mut b = match self.setup {
            DtiSetup::D1 => NormBounds::from_per_dual(vec![(r_e * r_e + r_t * r_t).sqrt()]),
            DtiSetup::D2 => NormBounds::from_per_dual(vec![r_e, r_t]),
            DtiSetup::D3 | DtiSetup::D4 => {
                let mut v = vec![r_e];
                v.extend_from_slice(r);
                NormBounds::from_per_dual(v)
            }
        };
        if self.setup == DtiSetup::D4 {
            let nv = self.n_voxels();
            let mut pp = vec![(0..nv).map(|v| (v, r_e)).collect::<Vec<_>>()];
            for v in 0..nv {
                for k in 0..n {
                    pp.push(vec![(v, r[v * n + k])]);
                }
            }
            b.per_pair = Some(pp);
        }
        b.global = (r_e * r_e + r_t * r_t).sqrt();
        b
    }

    /// Norm bounds built from the static `r_{k,ξ}`.
    pub fn static_bounds(&self) -> NormBounds {
        self.bounds_from(&self.r_static)
    }

    /// Initial primal steps: `τ = 1/R`, or `τ_ξ = Rτ/(1 + N max_k r_{k,ξ})` voxelwise.
    pub fn recommended_tau(&self) -> Vec<f64> {
        let r = self.r_total();
        let tau = 1.0 / r;
        match self.setup {
            DtiSetup::D4 => {
                let n = self.data.n_gradients();
                (0..self.n_voxels())
                    .map(|v| {
                        let m = self.r_static[v * n..(v + 1) * n].iter().copied().fold(0.0, f64::max);
                        r * tau / (1.0 + n as f64 * m)
                    })
                    .collect()
            }
            _ => vec![tau],
        }
    }

    /// Initial dual steps from the connection weights and static bounds.
    pub fn recommended_sigma(&self, kappa: f64) -> Result<Vec<f64>> {
        let m = self.primal.n_blocks();
        let n = self.dual.n_blocks();
        init_dual_steps_from_weights(
            &self.recommended_tau(),
            &self.graph,
            &self.static_bounds(),
            kappa,
            Family::FullDual,
            &vec![1.0; m],
            &vec![1.0; n],
        )
    }

    /// Deterministic full-dual state with fixed steps.
    pub fn recommended_state(&self, kappa: f64) -> Result<StepState> {
        let m = self.primal.n_blocks();
        let n = self.dual.n_blocks();
        StepState::new(
            Family::FullDual,
            Regime::Fixed,
            self.recommended_tau(),
            self.recommended_sigma(kappa)?,
            vec![1.0; m],
            vec![1.0; n],
            StepConstants::fixed(kappa, m, n),
            None,
        )
    }

    pub fn full_plans(&self) -> (SamplingPlan, SamplingPlan) {
        (SamplingPlan::full(self.primal.n_blocks()), SamplingPlan::full(self.dual.n_blocks()))
    }

    /// `T(x)` at index `ξ·N + k`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let n = self.data.n_gradients();
        let mut out = vec![0.0; n * self.n_voxels()];
        for v in 0..self.n_voxels() {
            for k in 0..n {
                let q: f64 = self.forms[k].iter().zip(&x[6 * v..6 * v + 6]).map(|(a, b)| a * b).sum();
                out[v * n + k] = self.data.s[v * n + k] - self.data.s0[v] * clamp_exp(-q);
            }
        }
        out
    }

    /// `α ‖E_d x‖_{F,1}`.
    pub fn regulariser(&self, x: &[f64]) -> f64 {
        let nv = self.n_voxels();
        let mut mu = vec![0.0; SYM3_DIM * nv];
        self.data.grid.symgrad(x, &mut mu);
        self.alpha
            * mu.chunks(SYM3_DIM).map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt()).sum::<f64>()
    }
}

fn clamp_exp(e: f64) -> f64 {
    if e > EXP_CLAMP {
        if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("clamping exponent {e} to {EXP_CLAMP} in the DTI forward model");
        }
        EXP_CLAMP.exp()
    } else {
        e.exp()
    }
}

impl Problem for DtiProblem {
    fn primal_partition(&self) -> &BlockPartition {
        &self.primal
    }

    fn dual_partition(&self) -> &BlockPartition {
        &self.dual
    }

    fn prox_g(&self, _j: usize, _tau: f64, _x: &mut [f64]) {}

    fn prox_fstar(&self, l: usize, sigma: f64, y: &mut [f64]) {
        let r = self.dual.block(l).as_range().expect("range blocks");
        let nmu = SYM3_DIM * self.n_voxels();
        let mu_end = r.end.min(nmu);
        if r.start < mu_end {
            prox_ball_indicator(sigma, self.alpha, MOREAU_YOSIDA_GAMMA, SYM3_DIM, &mut y[r.start..mu_end]);
        }
        let lam_start = r.start.max(nmu);
        let f = 1.0 / (1.0 + sigma);
        for a in &mut y[lam_start..r.end.max(lam_start)] {
            *a *= f;
        }
    }

    fn k_eval(&self, x: &[f64], out: &mut [f64]) {
        let nmu = SYM3_DIM * self.n_voxels();
        let (mu, lam) = out.split_at_mut(nmu);
        self.data.grid.symgrad(x, mu);
        lam.copy_from_slice(&self.residual(x));
    }

    fn jacobian<'a>(&'a self, x: &[f64]) -> Box<dyn LinearMap + 'a> {
        let n = self.data.n_gradients();
        let scale = (0..self.n_voxels())
            .flat_map(|v| {
                (0..n).map(move |k| {
                    let q: f64 = self.forms[k].iter().zip(&x[6 * v..6 * v + 6]).map(|(a, b)| a * b).sum();
                    self.data.s0[v] * clamp_exp(-q)
                })
            })
            .collect();
        Box::new(DtiJacobian { problem: self, scale })
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let t = self.residual(x);
        0.5 * t.iter().map(|a| a * a).sum::<f64>() + self.regulariser(x)
    }

    fn gamma_fstar(&self) -> Vec<f64> {
        let mu = 2.0 * MOREAU_YOSIDA_GAMMA / self.alpha;
        (0..self.dual.n_blocks())
            .map(|l| match (self.setup, l) {
                (DtiSetup::D1, _) => mu.min(1.0),
                (_, 0) => mu,
                _ => 1.0,
            })
            .collect()
    }

    fn nl_mask(&self) -> Vec<bool> {
        (0..self.dual.n_blocks())
            .map(|l| match (self.setup, l) {
                (DtiSetup::D1, _) => true,
                (_, 0) => false,
                _ => true,
            })
            .collect()
    }

    fn norm_bounds(&self, x: &[f64]) -> Option<NormBounds> {
        Some(self.bounds_from(&self.r_at(x)))
    }

    fn connection_graph(&self) -> Option<ConnectionGraph> {
        Some(self.graph.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_forward_value() {
        let data = DtiData {
            grid: Grid { dims: [1, 1, 1] },
            gradients: vec![[1.0, 0.0, 0.0]],
            s0: vec![1.0],
            s: vec![0.0],
            x_true: None,
        };
        let p = DtiProblem::new(data, 0.005, DtiSetup::D1).unwrap();
        let t = p.residual(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((t[0] + (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn constant_field_has_zero_symgrad() {
        let g = Grid { dims: [3, 2, 4] };
        let x: Vec<f64> = (0..6 * g.n_voxels()).map(|i| (i % 6) as f64 + 0.5).collect();
        let mut mu = vec![1.0; 10 * g.n_voxels()];
        g.symgrad(&x, &mut mu);
        assert!(mu.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn gradient_form_norm() {
        for b in default_gradients() {
            let f = gradient_form(&b);
            let n: f64 = f.iter().map(|a| a * a).sum::<f64>().sqrt();
            let bb = b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
            assert!((n - bb).abs() < 1e-14);
        }
    }

    #[test]
    fn setup_parse() {
        assert_eq!("D3".parse::<DtiSetup>().unwrap(), DtiSetup::D3);
        assert!("d5".parse::<DtiSetup>().is_err());
    }
}
