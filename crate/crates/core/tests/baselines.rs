use blockpd::models::baselines::{ForwardBackwardSum, QuadraticSaddle, Tv1d};
use blockpd::problem::Problem;
use blockpd::sampling::SamplingPlan;
use blockpd::solvers::{Algorithm, SolverRun};
use blockpd::stepper::{init_dual_steps_from_weights, Family, Regime, StepConstants, StepState};
use nalgebra::{DMatrix, DVector};

#[test]
fn quadratic_saddle_solution_satisfies_optimality() {
    for seed in 0..5 {
        let q = QuadraticSaddle::random(&[3, 2], &[4, 1], 0.7, 1.3, seed).unwrap();
        let (xs, ys) = q.solution().unwrap();
        let (x, y) = (DVector::from_vec(xs.clone()), DVector::from_vec(ys.clone()));
        let a = DVector::from_vec(q.a.clone());
        let b = DVector::from_vec(q.b.clone());
        // 0 ∈ ∂G(x*) + Aᵀy*, 0 ∈ ∂F*(y*) − Ax*
        let rx = (&x - &a) * q.gamma_g + q.a_mat.tr_mul(&y);
        let ry = &y * q.gamma_f + &b - &q.a_mat * &x;
        assert!(rx.amax() <= 1e-12 && ry.amax() <= 1e-12);
        // and x* minimises the primal objective along random directions
        let f0 = q.objective(&xs);
        for k in 0..5 {
            let d: Vec<f64> = (0..5).map(|i| ((i * 3 + k) % 7) as f64 * 1e-3 - 3e-3).collect();
            let xp: Vec<f64> = xs.iter().zip(&d).map(|(u, v)| u + v).collect();
            assert!(q.objective(&xp) >= f0);
        }
    }
}

#[test]
fn quadratic_saddle_rejects_bad_input() {
    let p = blockpd::blocks::BlockPartition::single(2).unwrap();
    assert!(QuadraticSaddle::new(DMatrix::zeros(2, 3), vec![0.0; 2], vec![0.0; 2], 1.0, 1.0, p.clone(), p.clone())
        .is_err());
    assert!(QuadraticSaddle::new(DMatrix::zeros(2, 2), vec![0.0; 2], vec![0.0; 2], 0.0, 1.0, p.clone(), p).is_err());
}

fn run_tv(tv: &Tv1d, iters: usize) -> Vec<f64> {
    let g = tv.connection_graph().unwrap();
    let norms = tv.norm_bounds(&[]).unwrap();
    let m = tv.primal_partition().n_blocks();
    let n = tv.dual_partition().n_blocks();
    let tau = vec![0.5; m];
    let s = init_dual_steps_from_weights(&tau, &g, &norms, 0.05, Family::FullDual, &vec![1.0; m], &vec![1.0; n]).unwrap();
    let st = StepState::new(Family::FullDual, Regime::Fixed, tau, s, vec![1.0; m], vec![1.0; n],
        StepConstants::fixed(0.05, m, n), None).unwrap();
    SolverRun::new(tv, st, SamplingPlan::full(m), SamplingPlan::full(n), Algorithm::FullDualV1, iters, iters)
        .unwrap()
        .run()
        .x
}

#[test]
fn tv_with_large_alpha_flattens_to_the_mean() {
    let f = Tv1d::step_signal(16, 0.1, 2);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let tv = Tv1d::new(f, 100.0, 0.0, 4, 3).unwrap();
    let x = run_tv(&tv, 20_000);
    for v in x {
        assert!((v - mean).abs() <= 1e-6, "{v} vs {mean}");
    }
}

#[test]
fn tv_with_small_alpha_keeps_the_signal() {
    let f = Tv1d::step_signal(30, 0.1, 5);
    let tv = Tv1d::new(f.clone(), 1e-9, 0.0, 2, 2).unwrap();
    let x = run_tv(&tv, 2000);
    let err = x.iter().zip(&f).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn forward_backward_sum_minimiser_solves_normal_equations() {
    let fb = ForwardBackwardSum::random(6, 2, 4, 3, 0.4, 8).unwrap();
    let x = fb.minimizer().to_vec();
    let mut grad: Vec<f64> = x.iter().zip(&fb.center).map(|(u, c)| fb.gamma * (u - c)).collect();
    for l in 0..4 {
        for (g, t) in grad.iter_mut().zip(fb.term_gradient(l, &x)) {
            *g += t;
        }
    }
    assert!(grad.iter().all(|g| g.abs() <= 1e-12), "{grad:?}");
    let (xs, ys) = fb.solution().unwrap();
    assert_eq!(xs, x);
    assert_eq!(ys, vec![1.0; 4]);
}

#[test]
fn forward_backward_sum_term_lipschitz_bounds_gradients() {
    let fb = ForwardBackwardSum::random(5, 1, 3, 4, 0.4, 1).unwrap();
    let lip = fb.term_lipschitz();
    let x0 = vec![0.0; 5];
    let x1: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
    let dx = x1.iter().map(|v| v * v).sum::<f64>().sqrt();
    for l in 0..3 {
        let g0 = fb.term_gradient(l, &x0);
        let g1 = fb.term_gradient(l, &x1);
        let dg = g0.iter().zip(&g1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(dg <= lip[l] * dx * (1.0 + 1e-12));
    }
}
