//! Convex problems with known or cheaply computed solutions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{BlockPartition, ConnectionGraph};
use crate::problem::{
    prox_quadratic_linear, prox_shifted_quadratic, LinearMap, NormBounds, Problem,
};
use crate::{Error, Result};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * { let z: f64 = StandardNormal.sample(rng); z })
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

fn block_of(m: &DMatrix<f64>, rows: &BlockPartition, l: usize, cols: &BlockPartition, j: usize) -> DMatrix<f64> {
    let r: Vec<usize> = rows.block(l).iter().collect();
    let c: Vec<usize> = cols.block(j).iter().collect();
    DMatrix::from_fn(r.len(), c.len(), |a, b| m[(r[a], c[b])])
}

struct MatrixMap<'a>(&'a DMatrix<f64>);

impl LinearMap for MatrixMap<'_> {
    fn apply(&self, dx: &[f64], dy: &mut [f64]) {
        let v = self.0 * DVector::from_column_slice(dx);
        dy.copy_from_slice(v.as_slice());
    }

    fn apply_adjoint(&self, dy: &[f64], dx: &mut [f64]) {
        let v = self.0.tr_mul(&DVector::from_column_slice(dy));
        dx.copy_from_slice(v.as_slice());
    }
}

/// `min_x (γ_G/2)‖x − a‖² + F(Ax)` with `F*(y) = (γ_F/2)‖y‖² + ⟨b, y⟩`.
#[derive(Debug, Clone)]
pub struct QuadraticSaddle {
    pub a_mat: DMatrix<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma_g: f64,
    pub gamma_f: f64,
    primal: BlockPartition,
    dual: BlockPartition,
    bounds: NormBounds,
    graph: ConnectionGraph,
    solution: (Vec<f64>, Vec<f64>),
}

impl QuadraticSaddle {
    pub fn new(
        a_mat: DMatrix<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
        gamma_g: f64,
        gamma_f: f64,
        primal: BlockPartition,
        dual: BlockPartition,
    ) -> Result<Self> {
        let (ny, nx) = a_mat.shape();
        if nx != primal.total_dim() || ny != dual.total_dim() || a.len() != nx || b.len() != ny {
            return Err(Error::Structure("quadratic saddle dimensions disagree".into()));
        }
        if !(gamma_g > 0.0 && gamma_f > 0.0) {
            return Err(Error::Config("quadratic saddle needs gamma_g, gamma_f > 0".into()));
        }
        let (m, n) = (primal.n_blocks(), dual.n_blocks());
        let mut per_dual = Vec::with_capacity(n);
        let mut per_pair = Vec::with_capacity(n);
        let mut neighbors = vec![Vec::new(); m];
        for l in 0..n {
            let r: Vec<usize> = dual.block(l).iter().collect();
            let rows = DMatrix::from_fn(r.len(), nx, |a, b| a_mat[(r[a], b)]);
            per_dual.push(spectral_norm(&rows));
            let mut pairs = Vec::new();
            for (j, nb) in neighbors.iter_mut().enumerate() {
                let r = spectral_norm(&block_of(&a_mat, &dual, l, &primal, j));
                if r > 0.0 {
                    pairs.push((j, r));
                    nb.push(l);
                }
            }
            per_pair.push(pairs);
        }
        let bounds = NormBounds {
            global: spectral_norm(&a_mat),
            per_dual,
            per_pair: Some(per_pair),
            converged: true,
        };
        let graph = ConnectionGraph::from_neighbors(n, &neighbors)?;

        // γ_G(x − a) + Aᵀy = 0, Ax − γ_F y − b = 0
        let lhs = a_mat.tr_mul(&a_mat) + DMatrix::identity(nx, nx) * (gamma_g * gamma_f);
        let rhs = DVector::from_column_slice(&a) * (gamma_g * gamma_f)
            + a_mat.tr_mul(&DVector::from_column_slice(&b));
        let xs = lhs
            .cholesky()
            .ok_or_else(|| Error::Structure("optimality system not positive definite".into()))?
            .solve(&rhs);
        let ys = (&a_mat * &xs - DVector::from_column_slice(&b)) / gamma_f;
        let solution = (xs.as_slice().to_vec(), ys.as_slice().to_vec());
        Ok(QuadraticSaddle { a_mat, a, b, gamma_g, gamma_f, primal, dual, bounds, graph, solution })
    }

    /// Random instance with Gaussian `A` scaled by `1/√nx`.
    pub fn random(
        primal_sizes: &[usize],
        dual_sizes: &[usize],
        gamma_g: f64,
        gamma_f: f64,
        seed: u64,
    ) -> Result<Self> {
        let primal = BlockPartition::from_sizes(primal_sizes)?;
        let dual = BlockPartition::from_sizes(dual_sizes)?;
        let (nx, ny) = (primal.total_dim(), dual.total_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_mat = random_matrix(&mut rng, ny, nx, 1.0 / (nx as f64).sqrt());
        let a = random_vector(&mut rng, nx);
        let b = random_vector(&mut rng, ny);
        Self::new(a_mat, a, b, gamma_g, gamma_f, primal, dual)
    }
}

impl Problem for QuadraticSaddle {
    fn primal_partition(&self) -> &BlockPartition {
        &self.primal
    }

    fn dual_partition(&self) -> &BlockPartition {
        &self.dual
    }

    fn prox_g(&self, j: usize, tau: f64, x: &mut [f64]) {
        let r = self.primal.block(j).as_range().expect("range blocks");
        prox_shifted_quadratic(tau, self.gamma_g, &self.a[r.clone()], &mut x[r]);
    }

    fn prox_fstar(&self, l: usize, sigma: f64, y: &mut [f64]) {
        let r = self.dual.block(l).as_range().expect("range blocks");
        prox_quadratic_linear(sigma, self.gamma_f, &self.b[r.clone()], &mut y[r]);
    }

    fn k_eval(&self, x: &[f64], out: &mut [f64]) {
        MatrixMap(&self.a_mat).apply(x, out)
    }

    fn jacobian<'a>(&'a self, _x: &[f64]) -> Box<dyn LinearMap + 'a> {
        Box::new(MatrixMap(&self.a_mat))
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let mut kx = vec![0.0; self.b.len()];
        self.k_eval(x, &mut kx);
        let g: f64 = x.iter().zip(&self.a).map(|(u, v)| (u - v) * (u - v)).sum();
        let f: f64 = kx.iter().zip(&self.b).map(|(u, v)| (u - v) * (u - v)).sum();
        0.5 * self.gamma_g * g + 0.5 * f / self.gamma_f
    }

    fn gamma_g(&self) -> Vec<f64> {
        vec![self.gamma_g; self.primal.n_blocks()]
    }

    fn gamma_fstar(&self) -> Vec<f64> {
        vec![self.gamma_f; self.dual.n_blocks()]
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }

    fn nl_mask(&self) -> Vec<bool> {
        vec![false; self.dual.n_blocks()]
    }

    fn norm_bounds(&self, _x: &[f64]) -> Option<NormBounds> {
        Some(self.bounds.clone())
    }

    fn connection_graph(&self) -> Option<ConnectionGraph> {
        Some(self.graph.clone())
    }

    fn solution(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some(self.solution.clone())
    }
}

/// One-dimensional total variation denoising
/// `min_x ½‖x − f‖² + F(Dx)` with `F* = δ_{[−α,α]^n} + (γ/2)‖·‖²`.
#[derive(Debug, Clone)]
pub struct Tv1d {
    pub signal: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
    primal: BlockPartition,
    dual: BlockPartition,
}

struct Diff;

impl LinearMap for Diff {
    fn apply(&self, dx: &[f64], dy: &mut [f64]) {
        for (i, d) in dy.iter_mut().enumerate() {
            *d = dx[i + 1] - dx[i];
        }
    }

    fn apply_adjoint(&self, dy: &[f64], dx: &mut [f64]) {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (i, d) in dy.iter().enumerate() {
            dx[i] -= d;
            dx[i + 1] += d;
        }
    }
}

fn chunks(n: usize, parts: usize) -> Vec<usize> {
    let parts = parts.clamp(1, n);
    (0..parts).map(|p| (p + 1) * n / parts - p * n / parts).collect()
}

impl Tv1d {
    pub fn new(signal: Vec<f64>, alpha: f64, gamma: f64, primal_blocks: usize, dual_blocks: usize) -> Result<Self> {
        let n = signal.len();
        if n < 2 {
            return Err(Error::Structure("TV signal needs at least two samples".into()));
        }
        if !(alpha > 0.0 && gamma >= 0.0) {
            return Err(Error::Config("TV needs alpha > 0 and gamma >= 0".into()));
        }
        let primal = BlockPartition::from_sizes(&chunks(n, primal_blocks))?;
        let dual = BlockPartition::from_sizes(&chunks(n - 1, dual_blocks))?;
        Ok(Tv1d { signal, alpha, gamma, primal, dual })
    }

    /// Noisy step: zeros then ones, Gaussian noise of deviation `noise`.
    pub fn step_signal(n: usize, noise: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let base = if i < n / 2 { 0.0 } else { 1.0 };
                let e: f64 = StandardNormal.sample(&mut rng);
                base + noise * e
            })
            .collect()
    }

    fn huber(&self, z: f64) -> f64 {
        let a = z.abs();
        if self.gamma > 0.0 && a <= self.alpha * self.gamma {
            z * z / (2.0 * self.gamma)
        } else {
            self.alpha * a - 0.5 * self.alpha * self.alpha * self.gamma
        }
    }
}

impl Problem for Tv1d {
    fn primal_partition(&self) -> &BlockPartition {
        &self.primal
    }

    fn dual_partition(&self) -> &BlockPartition {
        &self.dual
    }

    fn prox_g(&self, j: usize, tau: f64, x: &mut [f64]) {
        let r = self.primal.block(j).as_range().expect("range blocks");
        prox_shifted_quadratic(tau, 1.0, &self.signal[r.clone()], &mut x[r]);
    }

    fn prox_fstar(&self, l: usize, sigma: f64, y: &mut [f64]) {
        let r = self.dual.block(l).as_range().expect("range blocks");
        let d = 1.0 / (1.0 + sigma * self.gamma);
        for v in &mut y[r] {
            *v = (*v * d).clamp(-self.alpha, self.alpha);
        }
    }

    fn k_eval(&self, x: &[f64], out: &mut [f64]) {
        Diff.apply(x, out)
    }

    fn jacobian<'a>(&'a self, _x: &[f64]) -> Box<dyn LinearMap + 'a> {
        Box::new(Diff)
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let g: f64 = x.iter().zip(&self.signal).map(|(u, v)| 0.5 * (u - v) * (u - v)).sum();
        let f: f64 = x.windows(2).map(|w| self.huber(w[1] - w[0])).sum();
        g + f
    }

    fn gamma_g(&self) -> Vec<f64> {
        vec![1.0; self.primal.n_blocks()]
    }

    fn gamma_fstar(&self) -> Vec<f64> {
        vec![self.gamma; self.dual.n_blocks()]
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }

    fn nl_mask(&self) -> Vec<bool> {
        vec![false; self.dual.n_blocks()]
    }

    fn norm_bounds(&self, _x: &[f64]) -> Option<NormBounds> {
        let mut b = NormBounds::from_per_dual(vec![2.0; self.dual.n_blocks()]);
        b.global = 2.0;
        Some(b)
    }

    fn connection_graph(&self) -> Option<ConnectionGraph> {
        // row i of D touches columns i and i + 1
        let m = self.primal.n_blocks();
        let mut nb = vec![Vec::new(); m];
        for l in 0..self.dual.n_blocks() {
            let mut js: Vec<usize> = self
                .dual
                .block(l)
                .iter()
                .flat_map(|i| [self.primal.owner(i), self.primal.owner(i + 1)])
                .collect();
            js.sort_unstable();
            js.dedup();
            for j in js {
                nb[j].push(l);
            }
        }
        ConnectionGraph::from_neighbors(self.dual.n_blocks(), &nb).ok()
    }
}

/// `min_x (γ/2)‖x − c‖² + Σ_ℓ J_ℓ(x)` with `J_ℓ(x) = ½‖A_ℓ x − b_ℓ‖²`, posed
/// as `K(x) = (J_1(x), …, J_n(x))` and `F* = δ_{(1,…,1)}`.
#[derive(Debug, Clone)]
pub struct ForwardBackwardSum {
    pub mats: Vec<DMatrix<f64>>,
    pub rhs: Vec<Vec<f64>>,
    pub center: Vec<f64>,
    pub gamma: f64,
    primal: BlockPartition,
    dual: BlockPartition,
    minimizer: Vec<f64>,
}

struct GradRows {
    grads: Vec<Vec<f64>>,
}

impl LinearMap for GradRows {
    fn apply(&self, dx: &[f64], dy: &mut [f64]) {
        for (d, g) in dy.iter_mut().zip(&self.grads) {
            *d = g.iter().zip(dx).map(|(a, b)| a * b).sum();
        }
    }

    fn apply_adjoint(&self, dy: &[f64], dx: &mut [f64]) {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (w, g) in dy.iter().zip(&self.grads) {
            for (o, a) in dx.iter_mut().zip(g) {
                *o += w * a;
            }
        }
    }
}

impl ForwardBackwardSum {
    pub fn new(
        mats: Vec<DMatrix<f64>>,
        rhs: Vec<Vec<f64>>,
        center: Vec<f64>,
        gamma: f64,
        primal: BlockPartition,
    ) -> Result<Self> {
        let nx = primal.total_dim();
        if mats.is_empty() || mats.len() != rhs.len() || center.len() != nx {
            return Err(Error::Structure("forward-backward sum dimensions disagree".into()));
        }
        if mats.iter().zip(&rhs).any(|(m, b)| m.ncols() != nx || m.nrows() != b.len()) {
            return Err(Error::Structure("forward-backward sum dimensions disagree".into()));
        }
        if !(gamma > 0.0) {
            return Err(Error::Config("forward-backward sum needs gamma > 0".into()));
        }
        let dual = BlockPartition::from_sizes(&vec![1; mats.len()])?;
        let mut lhs = DMatrix::identity(nx, nx) * gamma;
        let mut r = DVector::from_column_slice(&center) * gamma;
        for (m, b) in mats.iter().zip(&rhs) {
            lhs += m.tr_mul(m);
            r += m.tr_mul(&DVector::from_column_slice(b));
        }
        let minimizer = lhs
            .cholesky()
            .ok_or_else(|| Error::Structure("normal equations not positive definite".into()))?
            .solve(&r)
            .as_slice()
            .to_vec();
        Ok(ForwardBackwardSum { mats, rhs, center, gamma, primal, dual, minimizer })
    }

    pub fn random(nx: usize, primal_blocks: usize, n_terms: usize, rows: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / ((rows * n_terms) as f64).sqrt();
        let mats: Vec<_> = (0..n_terms).map(|_| random_matrix(&mut rng, rows, nx, scale)).collect();
        let rhs: Vec<_> = (0..n_terms).map(|_| random_vector(&mut rng, rows)).collect();
        let center = random_vector(&mut rng, nx);
        let primal = BlockPartition::from_sizes(&chunks(nx, primal_blocks))?;
        Self::new(mats, rhs, center, gamma, primal)
    }

    /// `∇J_ℓ(x) = A_ℓᵀ(A_ℓ x − b_ℓ)`.
    pub fn term_gradient(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let r = &self.mats[l] * DVector::from_column_slice(x) - DVector::from_column_slice(&self.rhs[l]);
        self.mats[l].tr_mul(&r).as_slice().to_vec()
    }

    fn term_value(&self, l: usize, x: &[f64]) -> f64 {
        let r = &self.mats[l] * DVector::from_column_slice(x) - DVector::from_column_slice(&self.rhs[l]);
        0.5 * r.norm_squared()
    }

    /// Lipschitz factors `‖A_ℓᵀ A_ℓ‖` of the term gradients.
    pub fn term_lipschitz(&self) -> Vec<f64> {
        self.mats.iter().map(|m| spectral_norm(m).powi(2)).collect()
    }

    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }
}

impl Problem for ForwardBackwardSum {
    fn primal_partition(&self) -> &BlockPartition {
        &self.primal
    }

    fn dual_partition(&self) -> &BlockPartition {
        &self.dual
    }

    fn prox_g(&self, j: usize, tau: f64, x: &mut [f64]) {
        let r = self.primal.block(j).as_range().expect("range blocks");
        prox_shifted_quadratic(tau, self.gamma, &self.center[r.clone()], &mut x[r]);
    }

    fn prox_fstar(&self, l: usize, _sigma: f64, y: &mut [f64]) {
        y[l] = 1.0;
    }

    fn k_eval(&self, x: &[f64], out: &mut [f64]) {
        for (l, o) in out.iter_mut().enumerate() {
            *o = self.term_value(l, x);
        }
    }

    fn k_eval_blocks(&self, x: &[f64], blocks: &[usize], out: &mut [f64]) {
        for &l in blocks {
            out[l] = self.term_value(l, x);
        }
    }

    fn jacobian<'a>(&'a self, x: &[f64]) -> Box<dyn LinearMap + 'a> {
        Box::new(GradRows { grads: (0..self.mats.len()).map(|l| self.term_gradient(l, x)).collect() })
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let g: f64 = x.iter().zip(&self.center).map(|(u, v)| (u - v) * (u - v)).sum();
        0.5 * self.gamma * g + (0..self.mats.len()).map(|l| self.term_value(l, x)).sum::<f64>()
    }

    fn gamma_g(&self) -> Vec<f64> {
        vec![self.gamma; self.primal.n_blocks()]
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(self.term_lipschitz().iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    fn norm_bounds(&self, x: &[f64]) -> Option<NormBounds> {
        let mut per_dual = Vec::new();
        let mut per_pair = Vec::new();
        for l in 0..self.mats.len() {
            let g = self.term_gradient(l, x);
            per_dual.push(g.iter().map(|v| v * v).sum::<f64>().sqrt());
            per_pair.push(
                (0..self.primal.n_blocks())
                    .map(|j| (j, self.primal.block_norm_sq(j, &g).sqrt()))
                    .collect(),
            );
        }
        let mut b = NormBounds::from_per_dual(per_dual);
        b.per_pair = Some(per_pair);
        Some(b)
    }

    fn connection_graph(&self) -> Option<ConnectionGraph> {
        Some(ConnectionGraph::fully_connected(self.primal.n_blocks(), self.mats.len()))
    }

    fn solution(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.minimizer.clone(), vec![1.0; self.mats.len()]))
    }

    fn initial_point(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.primal.total_dim()], vec![1.0; self.mats.len()])
    }
}
