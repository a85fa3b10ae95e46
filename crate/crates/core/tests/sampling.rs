use blockpd::sampling::{draw_blocks, SamplingMode, SamplingPlan};
use proptest::prelude::*;

fn frequencies(plan: &SamplingPlan, n_draws: u64) -> Vec<f64> {
    let mut counts = vec![0u64; plan.n_blocks()];
    for i in 0..n_draws {
        for j in plan.draw(i) {
            counts[j] += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / n_draws as f64).collect()
}

#[test]
fn bernoulli_half_frequency_matches_conditioned_probability() {
    let plan = SamplingPlan::bernoulli(vec![0.5; 4], 7, 0).unwrap();
    // redrawing the empty set conditions on a non-empty draw
    let expected = 0.5 / (1.0 - 0.5f64.powi(4));
    let eff = plan.effective_probabilities();
    assert!((eff[0] - expected).abs() < 1e-15);
    for f in frequencies(&plan, 100_000) {
        assert!((f - expected).abs() <= 0.01, "{f} vs {expected}");
    }
}

#[test]
fn conditioned_probabilities_match_monte_carlo() {
    let pi = vec![0.3, 0.7];
    let plan = SamplingPlan::bernoulli(pi.clone(), 3, 1).unwrap();
    let empty = 0.7 * 0.3;
    let eff = plan.effective_probabilities();
    for j in 0..2 {
        assert!((eff[j] - pi[j] / (1.0 - empty)).abs() < 1e-15);
    }
    let n = 2_000_000;
    let f = frequencies(&plan, n);
    for j in 0..2 {
        let se = (eff[j] * (1.0 - eff[j]) / n as f64).sqrt();
        // three significant digits, and within four standard errors
        assert!((f[j] - eff[j]).abs() / eff[j] < 5e-3, "{} vs {}", f[j], eff[j]);
        assert!((f[j] - eff[j]).abs() <= 4.0 * se, "{} vs {}", f[j], eff[j]);
    }
}

#[test]
fn fixed_count_probabilities_match_monte_carlo() {
    let plan = SamplingPlan::fixed_count(5, 2, 9, 0).unwrap();
    assert_eq!(plan.mode(), SamplingMode::FixedCount(2));
    assert_eq!(plan.effective_probabilities(), vec![0.4; 5]);
    for i in 0..1000 {
        assert_eq!(plan.draw(i).len(), 2);
    }
    for f in frequencies(&plan, 100_000) {
        assert!((f - 0.4).abs() <= 0.01, "{f}");
    }
}

#[test]
fn full_sampling_returns_everything() {
    let plan = SamplingPlan::full(3);
    assert!(plan.is_full());
    assert_eq!(plan.draw(17), vec![0, 1, 2]);
    assert_eq!(plan.effective_probabilities(), vec![1.0; 3]);
    assert!(SamplingPlan::full(1).draw(0) == vec![0]);
}

#[test]
fn bernoulli_with_unit_probability_is_full() {
    let plan = SamplingPlan::bernoulli(vec![1.0; 3], 0, 0).unwrap();
    for i in 0..100 {
        assert_eq!(plan.draw(i), vec![0, 1, 2]);
    }
}

#[test]
fn successive_draws_are_uncorrelated() {
    let plan = SamplingPlan::bernoulli(vec![0.5; 4], 11, 2).unwrap();
    let n = 50_000u64;
    let ind: Vec<f64> = (0..n).map(|i| if plan.draw(i).contains(&0) { 1.0 } else { 0.0 }).collect();
    let m = ind.iter().sum::<f64>() / n as f64;
    let var = ind.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    let cov = ind.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / (n - 1) as f64;
    let rho = cov / var;
    assert!(rho.abs() <= 3.0 / (n as f64).sqrt(), "lag-one correlation {rho}");
}

#[test]
fn invalid_plans_are_rejected() {
    assert!(SamplingPlan::bernoulli(vec![], 0, 0).is_err());
    assert!(SamplingPlan::bernoulli(vec![0.5, 0.0], 0, 0).is_err());
    assert!(SamplingPlan::bernoulli(vec![1.5], 0, 0).is_err());
    assert!(SamplingPlan::fixed_count(3, 0, 0, 0).is_err());
    assert!(SamplingPlan::fixed_count(3, 4, 0, 0).is_err());
    let plan = SamplingPlan::full(3);
    assert!(draw_blocks(&plan, 0, 4).is_err());
    assert_eq!(draw_blocks(&plan, 0, 3).unwrap(), vec![0, 1, 2]);
}

proptest! {
    #[test]
    fn draws_are_a_pure_function_of_the_key(seed in any::<u64>(), stream in 0u64..8, it in 0u64..1_000_000, n in 1usize..12) {
        let a = SamplingPlan::bernoulli(vec![0.3; n], seed, stream).unwrap();
        let b = SamplingPlan::bernoulli(vec![0.3; n], seed, stream).unwrap();
        // querying out of order must not matter
        let _ = b.draw(it + 1);
        let da = a.draw(it);
        prop_assert_eq!(&da, &b.draw(it));
        prop_assert!(!da.is_empty());
        prop_assert!(da.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(da.iter().all(|&j| j < n));
    }

    #[test]
    fn streams_are_distinct(seed in any::<u64>()) {
        let a = SamplingPlan::bernoulli(vec![0.5; 16], seed, 0).unwrap();
        let b = SamplingPlan::bernoulli(vec![0.5; 16], seed, 1).unwrap();
        let same = (0..20).filter(|&i| a.draw(i) == b.draw(i)).count();
        prop_assert!(same < 5);
    }
}
