use blockpd::blocks::ConnectionGraph;
use blockpd::models::baselines::QuadraticSaddle;
use blockpd::problem::{NormBounds, Problem};
use blockpd::stepper::{
    init_dual_steps_from_weights, kappa_margin, Family, GrowthLimits, Regime, StepConstants, StepState,
    TrailingNormEstimator,
};
use proptest::prelude::*;

const REGIMES: [Regime; 4] = [Regime::Fixed, Regime::Acc2, Regime::Acc, Regime::Lin];
const FAMILIES: [Family; 2] = [Family::FullDual, Family::FullPrimal];

fn constants(kappa: f64, g: &[f64], gd: &[f64]) -> StepConstants {
    StepConstants { kappa, delta: kappa, gamma_tilde_g: g.to_vec(), gamma_dual: gd.to_vec() }
}

/// Two primal and three dual blocks with uneven steps and probabilities.
fn state(family: Family, regime: Regime) -> StepState {
    let (pp, dp) = match family {
        Family::FullDual => (vec![0.5, 0.8], vec![1.0; 3]),
        Family::FullPrimal => (vec![1.0; 2], vec![0.3, 1.0, 0.6]),
    };
    let (g, gd) = match regime {
        Regime::Fixed => (vec![0.0; 2], vec![0.0; 3]),
        Regime::Acc2 => (vec![0.1, 0.0], vec![0.2, 0.0, 0.05]),
        Regime::Acc => (vec![0.1, 0.3], vec![0.0; 3]),
        Regime::Lin => (vec![0.1, 0.3], vec![0.2, 0.4, 0.05]),
    };
    StepState::new(family, regime, vec![0.7, 1.3], vec![0.4, 2.0, 0.9], pp, dp, constants(0.05, &g, &gd), None)
        .unwrap()
}

#[test]
fn single_block_sigma_closed_forms() {
    let g = ConnectionGraph::fully_connected(1, 1);
    let r = 2.0;
    let norms = NormBounds::from_per_dual(vec![r]);
    let s = init_dual_steps_from_weights(&[1.0 / r], &g, &norms, 0.05, Family::FullDual, &[1.0], &[1.0]).unwrap();
    assert!((s[0] - 0.95 / r).abs() < 1e-15);
    let s = init_dual_steps_from_weights(&[0.5], &g, &norms, 0.05, Family::FullDual, &[1.0], &[1.0]).unwrap();
    assert!((s[0] - 0.475).abs() < 1e-15);
    // the full-primal test divides by ν
    let s = init_dual_steps_from_weights(&[0.5], &g, &norms, 0.05, Family::FullPrimal, &[1.0], &[0.5]).unwrap();
    assert!((s[0] - 0.2375).abs() < 1e-15);
}

#[test]
fn two_dual_blocks_with_weight() {
    let (re, rt) = (12f64.sqrt(), 5.0);
    let rr = (re * re + rt * rt).sqrt();
    let w = re / (rr - re);
    let mut g = ConnectionGraph::fully_connected(1, 2);
    g.set_weight(0, 1, 0, w).unwrap();
    let norms = NormBounds::from_per_dual(vec![re, rt]);
    let tau = 1.0 / rr;
    let s = init_dual_steps_from_weights(&[tau], &g, &norms, 0.05, Family::FullDual, &[1.0], &[1.0, 1.0]).unwrap();
    let sm = 0.95 / (tau * (1.0 + 1.0 / w) * re * re);
    let sl = 0.95 / (tau * (1.0 + w) * rt * rt);
    assert!((s[0] - sm).abs() <= 1e-14 * sm);
    assert!((s[1] - sl).abs() <= 1e-14 * sl);
}

#[test]
fn disconnected_dual_block_takes_neighbour_scale() {
    let mut g = ConnectionGraph::new(1, 2);
    g.connect(0, 0).unwrap();
    let norms = NormBounds::from_per_dual(vec![2.0, 0.0]);
    let s = init_dual_steps_from_weights(&[0.5], &g, &norms, 0.05, Family::FullDual, &[1.0], &[1.0, 1.0]).unwrap();
    assert_eq!(s[1], s[0]);
    let mut z = ConnectionGraph::new(1, 1);
    z.connect(0, 0).unwrap();
    let bad = NormBounds::from_per_dual(vec![0.0]);
    assert!(init_dual_steps_from_weights(&[0.5], &z, &bad, 0.05, Family::FullDual, &[1.0], &[1.0]).is_err());
}

#[test]
fn fixed_regime_is_the_identity() {
    for f in FAMILIES {
        let mut st = state(f, Regime::Fixed);
        let first = st.clone();
        for _ in 0..1000 {
            st.advance();
        }
        assert_eq!(st.tau, first.tau);
        assert_eq!(st.sigma, first.sigma);
        assert_eq!(st.phi, first.phi);
        assert_eq!(st.psi, first.psi);
        assert_eq!(st.omega_bar, 1.0);
        assert_eq!(st.iteration, 1000);
        assert!(st.coupling_residual() <= 1e-15);
    }
}

#[test]
fn fixed_regime_warns_about_ignored_acceleration() {
    let c = constants(0.05, &[0.2], &[0.0]);
    let st = StepState::new(Family::FullDual, Regime::Fixed, vec![1.0], vec![1.0], vec![1.0], vec![1.0], c, None)
        .unwrap();
    assert_eq!(st.warnings().len(), 1);
    assert!(state(Family::FullDual, Regime::Fixed).warnings().is_empty());
}

#[test]
fn coupling_holds_over_ten_thousand_updates() {
    for f in FAMILIES {
        for r in REGIMES {
            let mut st = state(f, r);
            assert!(st.coupling_residual() <= 1e-12, "{f:?} {r:?} at start");
            for i in 0..10_000 {
                st.advance();
                assert!(st.coupling_residual() <= 1e-12, "{f:?} {r:?} after {i}: {}", st.coupling_residual());
                assert!(st.omega_bar > 0.0 && st.omega_bar <= 1.0);
            }
        }
    }
}

#[test]
fn steps_are_non_increasing() {
    for f in FAMILIES {
        for r in [Regime::Acc2, Regime::Acc, Regime::Lin] {
            let mut st = state(f, r);
            for _ in 0..500 {
                let (t, s) = (st.tau.clone(), st.sigma.clone());
                st.advance();
                for j in 0..2 {
                    assert!(st.tau[j] <= t[j] * (1.0 + 1e-15), "{f:?} {r:?}");
                }
                if r == Regime::Acc {
                    // σ ← σ/ω̄ grows here; only the relaxed products stay bounded
                    continue;
                }
                for l in 0..3 {
                    assert!(st.sigma[l] <= s[l] * (1.0 + 1e-15), "{f:?} {r:?}");
                }
            }
        }
    }
}

#[test]
fn relaxed_product_rule_holds() {
    for r in REGIMES {
        let mut st = state(Family::FullDual, r);
        for _ in 0..2000 {
            assert!(st.product_rule_ratio() <= 1.0 + 1e-12, "{r:?}: {}", st.product_rule_ratio());
            st.advance();
        }
    }
}

#[test]
fn acc2_one_step_by_hand() {
    let c = constants(0.05, &[0.0], &[0.5]);
    let st = StepState::new(Family::FullDual, Regime::Acc2, vec![1.0], vec![1.0], vec![1.0], vec![1.0], c, None)
        .unwrap();
    // the state stores σ^{i+1}
    assert_eq!(st.sigma[0], 0.5);
    assert_eq!(st.psi[0], 2.0);
    assert_eq!(st.psi[0] * st.sigma[0], 1.0);
}

#[test]
fn acc2_zero_rates_reduce_to_fixed() {
    let c = constants(0.05, &[0.0, 0.0], &[0.0]);
    let mut st =
        StepState::new(Family::FullDual, Regime::Acc2, vec![1.0, 2.0], vec![0.3], vec![0.5, 1.0], vec![1.0], c, None)
            .unwrap();
    let first = st.clone();
    for _ in 0..100 {
        st.advance();
    }
    assert_eq!(st.tau, first.tau);
    assert_eq!(st.sigma, first.sigma);
}

#[test]
fn acc2_test_parameter_grows_linearly() {
    let mut st = state(Family::FullDual, Regime::Acc2);
    let phi0 = st.phi.clone();
    let n = 1000;
    for _ in 0..n {
        st.advance();
    }
    for j in 0..2 {
        let expected = phi0[j] + 2.0 * n as f64 * st.constants.gamma_tilde_g[j] * 1.0 / st.primal_probs[j];
        assert!((st.phi[j] - expected).abs() <= 1e-10 * expected, "{} vs {expected}", st.phi[j]);
    }
}

#[test]
fn acc_single_block_by_hand() {
    let c = constants(0.05, &[0.5], &[0.0]);
    let mut st = StepState::new(Family::FullDual, Regime::Acc, vec![1.0], vec![1.0], vec![1.0], vec![1.0], c, None)
        .unwrap();
    assert!((st.omega_bar - 0.5f64.sqrt()).abs() < 1e-15);
    let before = st.phi[0] * st.tau[0] * st.tau[0];
    st.advance();
    assert!((st.tau[0] - 0.5f64.sqrt()).abs() < 1e-15);
    assert!(st.phi[0] * st.tau[0] * st.tau[0] <= before * (1.0 + 1e-15));
}

#[test]
fn acc_monotone_phi_tau_squared_and_quadratic_growth() {
    for f in FAMILIES {
        let mut st = state(f, Regime::Acc);
        let mut z0: f64 = 0.0;
        for j in 0..2 {
            z0 = z0.max(1.0 / (2.0 * st.tau[j] * st.constants.gamma_tilde_g[j]));
        }
        let phi0 = st.phi.clone();
        for n in 1..=2000usize {
            let prev: Vec<f64> = (0..2).map(|j| st.phi[j] * st.tau[j] * st.tau[j]).collect();
            st.advance();
            for j in 0..2 {
                assert!(st.phi[j] * st.tau[j] * st.tau[j] <= prev[j] * (1.0 + 1e-14));
                let z = 1.0 / (2.0 * st.tau[j] * st.constants.gamma_tilde_g[j]);
                assert!(z <= z0 + n as f64 / 2.0 + 1e-9, "{f:?}: {z} > {z0} + {n}/2");
            }
        }
        for j in 0..2 {
            // φ^N / N² bounded below
            assert!(st.phi[j] / (2000.0f64 * 2000.0) > 1e-3 * phi0[j].min(1.0), "{f:?}");
        }
    }
}

#[test]
fn acc_equal_rates_attain_max_everywhere() {
    let c = constants(0.05, &[0.4, 0.4, 0.4], &[0.0]);
    let mut st =
        StepState::new(Family::FullDual, Regime::Acc, vec![1.0; 3], vec![1.0], vec![1.0; 3], vec![1.0], c, None)
            .unwrap();
    for _ in 0..10 {
        st.advance();
        assert!(st.tau.iter().all(|&t| t == st.tau[0]));
    }
}

#[test]
fn full_primal_acc_recursion() {
    let mut st = state(Family::FullPrimal, Regime::Acc);
    let g = st.constants.gamma_tilde_g.clone();
    for _ in 0..200 {
        let z: Vec<f64> = (0..2).map(|j| 1.0 / (2.0 * st.tau[j] * g[j])).collect();
        let zmax = z.iter().copied().fold(0.0, f64::max);
        st.advance();
        for j in 0..2 {
            let expected = (1.0 + z[j]) / (1.0 + 1.0 / zmax).sqrt();
            let got = 1.0 / (2.0 * st.tau[j] * g[j]);
            assert!((got - expected).abs() <= 1e-12 * expected);
        }
    }
}

#[test]
fn lin_by_hand() {
    let c = constants(0.05, &[0.5], &[0.5]);
    let mut st = StepState::new(Family::FullDual, Regime::Lin, vec![1.0], vec![1.0], vec![1.0], vec![1.0], c, None)
        .unwrap();
    assert_eq!(st.omega_bar, 0.5);
    st.advance();
    assert_eq!(st.tau[0], 1.0);
}

#[test]
fn lin_frozen_omega_is_a_fixed_point() {
    for f in FAMILIES {
        let mut st = state(f, Regime::Lin);
        let w = st.frozen_omega();
        let phi0 = st.phi.clone();
        for n in 1..=500 {
            st.advance();
            let g = &st.constants.gamma_tilde_g;
            let gd = &st.constants.gamma_dual;
            let m = (0..2)
                .map(|j| 1.0 / (1.0 + 2.0 * st.tau[j] * g[j]))
                .chain((0..3).map(|l| 1.0 / (1.0 + 2.0 * st.sigma[l] * gd[l])))
                .fold(0.0, f64::max);
            assert!((m - w).abs() <= 1e-12, "{f:?}: {m} vs {w}");
            assert_eq!(st.omega_bar, w);
            for j in 0..2 {
                assert!(st.phi[j] >= phi0[j] * w.powi(-n) * (1.0 - 1e-10));
            }
        }
    }
}

#[test]
fn lin_small_rates_approach_fixed() {
    let c = constants(0.05, &[1e-12], &[1e-12]);
    let st = StepState::new(Family::FullDual, Regime::Lin, vec![1.0], vec![1.0], vec![1.0], vec![1.0], c, None)
        .unwrap();
    assert!((st.omega_bar - 1.0).abs() < 1e-11);
}

#[test]
fn inadmissible_configurations_are_rejected() {
    let mk = |r, g: &[f64], gd: &[f64], lim: Option<&GrowthLimits>| {
        StepState::new(Family::FullDual, r, vec![1.0], vec![1.0], vec![0.5], vec![1.0], constants(0.05, g, gd), lim)
    };
    assert!(mk(Regime::Acc, &[0.0], &[0.0], None).is_err());
    assert!(mk(Regime::Lin, &[0.1], &[0.0], None).is_err());
    let lim = GrowthLimits { primal: vec![1.0], dual: vec![0.3] };
    // γ̃_G must stay below π γ̄_GK = 0.5
    assert!(mk(Regime::Acc2, &[0.6], &[0.0], Some(&lim)).is_err());
    assert!(mk(Regime::Acc2, &[0.4], &[0.0], Some(&lim)).is_ok());
    assert!(mk(Regime::Lin, &[0.4], &[0.5], Some(&lim)).is_err());
    assert!(mk(Regime::Acc2, &[-0.1], &[0.0], None).is_err());
    let bad_kappa = StepConstants { kappa: 0.05, delta: 0.1, gamma_tilde_g: vec![0.0], gamma_dual: vec![0.0] };
    assert!(StepState::new(Family::FullDual, Regime::Fixed, vec![1.0], vec![1.0], vec![1.0], vec![1.0], bad_kappa, None)
        .is_err());
    assert!(StepState::new(
        Family::FullDual,
        Regime::Fixed,
        vec![1.0],
        vec![1.0],
        vec![1.0],
        vec![0.5],
        StepConstants::fixed(0.05, 1, 1),
        None
    )
    .is_err());
}

#[test]
fn kappa_margin_detects_inflated_steps() {
    let q = QuadraticSaddle::random(&[2, 3], &[3, 1, 2], 1.0, 1.0, 5).unwrap();
    let g = q.connection_graph().unwrap();
    let norms = q.norm_bounds(&[0.0; 5]).unwrap();
    for f in FAMILIES {
        let (pp, dp) = match f {
            Family::FullDual => (vec![0.5, 1.0], vec![1.0; 3]),
            Family::FullPrimal => (vec![1.0; 2], vec![0.5, 1.0, 0.7]),
        };
        let tau = vec![0.3, 0.2];
        let s = init_dual_steps_from_weights(&tau, &g, &norms, 0.05, f, &pp, &dp).unwrap();
        let st = StepState::new(f, Regime::Fixed, tau.clone(), s.clone(), pp.clone(), dp.clone(),
            StepConstants::fixed(0.05, 2, 3), None).unwrap();
        let m = kappa_margin(&st, &g, &norms);
        assert!(m >= -1e-12, "{f:?}: {m}");
        assert!(m.abs() <= 1e-12, "the tightest block is saturated: {m}");
        let big: Vec<f64> = tau.iter().map(|t| 10.0 * t).collect();
        let st = StepState::new(f, Regime::Fixed, big, s, pp, dp, StepConstants::fixed(0.05, 2, 3), None).unwrap();
        assert!(kappa_margin(&st, &g, &norms) < 0.0);
    }
}

#[test]
fn rescaling_keeps_coupling() {
    let mut st = state(Family::FullDual, Regime::Lin);
    st.rescale_dual(&[0.5, 2.0, 1.5]);
    assert!(st.coupling_residual() <= 1e-15);
}

#[test]
fn trailing_estimator_examples() {
    let mut t = TrailingNormEstimator::default();
    assert_eq!(t.window(), 100);
    assert!(t.is_empty());
    assert!(t.estimate().is_empty());
    t.observe(&[1.0, 3.0]);
    t.observe(&[2.0, 1.0]);
    assert_eq!(t.estimate(), vec![2.0 * 1.05, 3.0 * 1.05]);
    let mut s = TrailingNormEstimator::new(2, 1.0);
    for v in [5.0, 1.0, 2.0] {
        s.observe(&[v]);
    }
    // the 5 has left the window
    assert_eq!(s.estimate(), vec![2.0]);
}

proptest! {
    #[test]
    fn estimate_is_monotone_in_window(obs in prop::collection::vec(0.0f64..10.0, 1..60), w in 1usize..30) {
        let mut a = TrailingNormEstimator::new(w, 1.05);
        let mut b = TrailingNormEstimator::new(w + 1, 1.05);
        for v in &obs {
            a.observe(&[*v]);
            b.observe(&[*v]);
        }
        prop_assert!(a.estimate()[0] <= b.estimate()[0]);
        let tail = obs.iter().rev().take(w).copied().fold(0.0, f64::max);
        prop_assert!((a.estimate()[0] - 1.05 * tail).abs() <= 1e-15 * tail);
    }

    #[test]
    fn coupling_random_configurations(
        tau in prop::collection::vec(0.01f64..10.0, 1..4),
        sig in prop::collection::vec(0.01f64..10.0, 1..4),
        g in 0.01f64..1.0,
        gd in 0.01f64..1.0,
        fam in 0usize..2,
        reg in 0usize..4,
    ) {
        let (m, n) = (tau.len(), sig.len());
        let family = FAMILIES[fam];
        let regime = REGIMES[reg];
        let gdual = if regime == Regime::Acc { vec![0.0; n] } else { vec![gd; n] };
        let gg = if regime == Regime::Fixed { vec![0.0; m] } else { vec![g; m] };
        let gdual = if regime == Regime::Fixed { vec![0.0; n] } else { gdual };
        let (pp, dp) = match family {
            Family::FullDual => (vec![0.6; m], vec![1.0; n]),
            Family::FullPrimal => (vec![1.0; m], vec![0.6; n]),
        };
        let mut st = StepState::new(family, regime, tau, sig, pp, dp,
            StepConstants { kappa: 0.05, delta: 0.05, gamma_tilde_g: gg, gamma_dual: gdual }, None).unwrap();
        for _ in 0..200 {
            st.advance();
            prop_assert!(st.coupling_residual() <= 1e-12);
            prop_assert!(st.tau.iter().chain(&st.sigma).chain(&st.phi).chain(&st.psi).all(|v| *v > 0.0 && v.is_finite()));
        }
    }
}
