use blockpd::blocks::BlockPartition;
use blockpd::models::baselines::{ForwardBackwardSum, QuadraticSaddle, Tv1d};
use blockpd::models::dti::{DtiData, DtiProblem, DtiSetup};
use blockpd::problem::{
    check_adjoint, check_jacobian_fd, estimate_norms_static, prox_ball_indicator, prox_l2_squared,
    prox_quadratic_linear, prox_shifted_quadratic, LinearMap, Problem,
};
use proptest::prelude::*;

fn vecs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn l2_optimality(v in vecs(5), sigma in 1e-3f64..1e3, scale in 1e-3f64..1e3) {
        let mut p = v.clone();
        prox_l2_squared(sigma, scale, &mut p);
        let r: Vec<f64> = v.iter().zip(&p).map(|(a, b)| a - b - sigma * scale * b).collect();
        prop_assert!(max_abs(&r) <= 1e-12 * (1.0 + max_abs(&v)));
    }

    #[test]
    fn shifted_quadratic_optimality(v in vecs(4), c in vecs(4), tau in 1e-3f64..1e3, g in 0.0f64..10.0) {
        let mut p = v.clone();
        prox_shifted_quadratic(tau, g, &c, &mut p);
        let r: Vec<f64> = (0..4).map(|i| v[i] - p[i] - tau * g * (p[i] - c[i])).collect();
        prop_assert!(max_abs(&r) <= 1e-12 * (1.0 + max_abs(&v) + tau * g * max_abs(&c)));
    }

    #[test]
    fn quadratic_linear_optimality(v in vecs(4), b in vecs(4), sigma in 1e-3f64..1e3, g in 0.0f64..10.0) {
        let mut p = v.clone();
        prox_quadratic_linear(sigma, g, &b, &mut p);
        let r: Vec<f64> = (0..4).map(|i| v[i] - p[i] - sigma * (g * p[i] + b[i])).collect();
        prop_assert!(max_abs(&r) <= 1e-12 * (1.0 + max_abs(&v) + sigma * max_abs(&b)));
    }

    #[test]
    fn ball_optimality_and_radius(v in vecs(6), sigma in 1e-3f64..1e3, alpha in 1e-3f64..10.0, g in 0.0f64..1e-3) {
        let mut p = v.clone();
        prox_ball_indicator(sigma, alpha, g, 3, &mut p);
        for (pc, vc) in p.chunks(3).zip(v.chunks(3)) {
            let n = pc.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(n <= alpha + 1e-14);
            // v − p − 2σγ/α p must lie in the normal cone of the ball at p
            let r: Vec<f64> = (0..3).map(|i| vc[i] - pc[i] - 2.0 * sigma * g / alpha * pc[i]).collect();
            let scale = 1.0 + max_abs(vc);
            if n < alpha * (1.0 - 1e-12) {
                prop_assert!(max_abs(&r) <= 1e-12 * scale);
            } else {
                let lam = r.iter().zip(pc).map(|(a, b)| a * b).sum::<f64>() / (n * n);
                prop_assert!(lam >= -1e-12 * scale);
                let orth: Vec<f64> = (0..3).map(|i| r[i] - lam * pc[i]).collect();
                prop_assert!(max_abs(&orth) <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn proxes_are_nonexpansive(a in vecs(6), b in vecs(6), sigma in 1e-2f64..1e2) {
        let d0 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let (mut pa, mut pb) = (a.clone(), b.clone());
        prox_ball_indicator(sigma, 1.0, 1e-9, 3, &mut pa);
        prox_ball_indicator(sigma, 1.0, 1e-9, 3, &mut pb);
        let d1 = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        prop_assert!(d1 <= d0 * (1.0 + 1e-14) + 1e-300);
    }

    #[test]
    fn prox_touches_only_its_block(v in vecs(11), l in 0usize..3, sigma in 0.1f64..10.0) {
        let q = QuadraticSaddle::random(&[3, 3, 4], &[4, 3, 3], 1.0, 0.5, 3).unwrap();
        let tv = Tv1d::new(vec![0.5; 11], 0.3, 0.1, 3, 3).unwrap();
        let problems: [&dyn Problem; 2] = [&q, &tv];
        for p in problems {
            let ny = p.dual_partition().total_dim();
            let nx = p.primal_partition().total_dim();
            let mut y = v[..ny].to_vec();
            p.prox_fstar(l, sigma, &mut y);
            let mut x = v[..nx].to_vec();
            p.prox_g(l, sigma, &mut x);
            for i in 0..ny {
                if p.dual_partition().owner(i) != l {
                    prop_assert_eq!(y[i].to_bits(), v[i].to_bits());
                }
            }
            for i in 0..nx {
                if p.primal_partition().owner(i) != l {
                    prop_assert_eq!(x[i].to_bits(), v[i].to_bits());
                }
            }
        }
    }
}

fn shipped() -> Vec<Box<dyn Problem>> {
    let dti = |s| Box::new(DtiProblem::new(DtiData::synthetic([3, 3, 2], 0.3, 1).unwrap(), 0.005, s).unwrap());
    vec![
        Box::new(QuadraticSaddle::random(&[3, 2], &[2, 2, 1], 1.0, 0.5, 2).unwrap()),
        Box::new(Tv1d::new(Tv1d::step_signal(20, 0.1, 1), 0.5, 0.1, 4, 3).unwrap()),
        Box::new(ForwardBackwardSum::random(6, 2, 4, 3, 0.5, 3).unwrap()),
        dti(DtiSetup::D1),
        dti(DtiSetup::D2),
        dti(DtiSetup::D3),
        dti(DtiSetup::D4),
    ]
}

#[test]
fn every_shipped_problem_passes_adjoint_and_fd_checks() {
    for (i, p) in shipped().iter().enumerate() {
        let nx = p.primal_partition().total_dim();
        let x: Vec<f64> = (0..nx).map(|k| 0.05 * ((k * 7 % 11) as f64 - 5.0) / 5.0).collect();
        assert!(check_adjoint(p.as_ref(), &x, 100, 5) <= 1e-10, "problem {i}");
        let h = 1e-6 * (1.0 + max_abs(&x));
        let fd = check_jacobian_fd(p.as_ref(), &x, 10, h, 6).unwrap();
        assert!(fd <= 1e-6, "problem {i}: {fd}");
    }
}

#[test]
fn linear_operator_differences_are_exact() {
    let q = QuadraticSaddle::random(&[4], &[3], 1.0, 1.0, 9).unwrap();
    let fd = check_jacobian_fd(&q, &[0.1, -0.2, 0.3, 0.0], 10, 1e-3, 1).unwrap();
    assert!(fd <= 1e-10, "{fd}");
}

/// `K(x) = Mx` whose "adjoint" forgets the transpose.
struct BrokenAdjoint {
    primal: BlockPartition,
    dual: BlockPartition,
}

struct Broken;

const M: [[f64; 3]; 3] = [[1.0, 2.0, 0.0], [0.0, 1.0, 3.0], [4.0, 0.0, 1.0]];

impl LinearMap for Broken {
    fn apply(&self, dx: &[f64], dy: &mut [f64]) {
        for r in 0..3 {
            dy[r] = (0..3).map(|c| M[r][c] * dx[c]).sum();
        }
    }

    fn apply_adjoint(&self, dy: &[f64], dx: &mut [f64]) {
        self.apply(dy, dx)
    }
}

impl Problem for BrokenAdjoint {
    fn primal_partition(&self) -> &BlockPartition {
        &self.primal
    }
    fn dual_partition(&self) -> &BlockPartition {
        &self.dual
    }
    fn prox_g(&self, _: usize, _: f64, _: &mut [f64]) {}
    fn prox_fstar(&self, _: usize, _: f64, _: &mut [f64]) {}
    fn k_eval(&self, x: &[f64], out: &mut [f64]) {
        Broken.apply(x, out)
    }
    fn jacobian<'a>(&'a self, _: &[f64]) -> Box<dyn LinearMap + 'a> {
        Box::new(Broken)
    }
    fn objective(&self, _: &[f64]) -> f64 {
        0.0
    }
}

#[test]
fn broken_adjoint_is_flagged() {
    let p = BrokenAdjoint { primal: BlockPartition::single(3).unwrap(), dual: BlockPartition::single(3).unwrap() };
    assert!(check_adjoint(&p, &[0.0; 3], 20, 1) > 1e-3);
    // the forward action alone is consistent
    assert!(check_jacobian_fd(&p, &[0.0; 3], 5, 1e-3, 1).unwrap() <= 1e-10);
}

struct Identity(BlockPartition);

impl Problem for Identity {
    fn primal_partition(&self) -> &BlockPartition {
        &self.0
    }
    fn dual_partition(&self) -> &BlockPartition {
        &self.0
    }
    fn prox_g(&self, _: usize, _: f64, _: &mut [f64]) {}
    fn prox_fstar(&self, _: usize, _: f64, _: &mut [f64]) {}
    fn k_eval(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x)
    }
    fn jacobian<'a>(&'a self, _: &[f64]) -> Box<dyn LinearMap + 'a> {
        struct I;
        impl LinearMap for I {
            fn apply(&self, dx: &[f64], dy: &mut [f64]) {
                dy.copy_from_slice(dx)
            }
            fn apply_adjoint(&self, dy: &[f64], dx: &mut [f64]) {
                dx.copy_from_slice(dy)
            }
        }
        Box::new(I)
    }
    fn objective(&self, _: &[f64]) -> f64 {
        0.0
    }
}

#[test]
fn power_iteration_norm_of_identity() {
    let b = estimate_norms_static(&Identity(BlockPartition::single(2).unwrap()), &[0.0, 0.0]);
    assert!(b.converged);
    assert!((b.per_dual[0] - 1.0).abs() < 1e-12);
}

#[test]
fn analytic_dti_bounds() {
    let p = DtiProblem::new(DtiData::synthetic([3, 3, 3], 0.3, 1).unwrap(), 0.005, DtiSetup::D2).unwrap();
    let b = estimate_norms_static(&p, &vec![0.0; 6 * 27]);
    assert_eq!(b.per_dual[0], 12f64.sqrt());
    let rt: f64 = p
        .data
        .s0
        .iter()
        .flat_map(|s| p.data.gradients.iter().map(move |g| s.abs() * (g[0] * g[0] + g[1] * g[1] + g[2] * g[2])))
        .map(|r| r * r)
        .sum::<f64>()
        .sqrt();
    assert!((b.per_dual[1] - rt).abs() <= 1e-12 * rt);
    assert!((b.global - (12.0 + rt * rt).sqrt()).abs() <= 1e-12 * b.global);
}

#[test]
fn block_norm_bounds_dominate_dense_norms() {
    use blockpd::diagnostics::dense_jacobian;
    for p in shipped() {
        let nx = p.primal_partition().total_dim();
        let x = vec![0.0; nx];
        let b = estimate_norms_static(p.as_ref(), &x);
        let j = dense_jacobian(p.as_ref(), &x);
        let dp = p.dual_partition();
        for l in 0..dp.n_blocks() {
            let rows: Vec<usize> = dp.block(l).iter().collect();
            let sub = nalgebra::DMatrix::from_fn(rows.len(), nx, |a, c| j[(rows[a], c)]);
            let s = sub.singular_values().max();
            assert!(s <= b.per_dual[l] * (1.0 + 1e-10) + 1e-14, "block {l}: {s} > {}", b.per_dual[l]);
        }
    }
}
