//! Mask-pattern probabilities against independent quadrature and closed forms,
//! normalization, and the distribution of sampled mask sizes.

use pmlm::masking::{enumerate_masks, mask_probability, sample_mask, MaskingPrior};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Adaptive Simpson on `[a, b]` to absolute tolerance `eps`.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, eps, 20)
}

/// `∫ r^k (1-r)^(n-k) p(r) dr` for a uniform density on `[a, b]`.
fn alpha_by_quadrature(n: usize, k: usize, a: f64, b: f64) -> f64 {
    let f = |r: f64| r.powi(k as i32) * (1.0 - r).powi((n - k) as i32) / (b - a);
    // tolerance relative to a coarse estimate, since values span many decades
    let panels = 64;
    let h = (b - a) / panels as f64;
    let coarse: f64 = (0..panels)
        .map(|i| {
            let x = a + i as f64 * h;
            h / 6.0 * (f(x) + 4.0 * f(x + h / 2.0) + f(x + h))
        })
        .sum();
    let eps = coarse.abs() * 1e-11 / panels as f64;
    (0..panels)
        .map(|i| simpson(&f, a + i as f64 * h, a + (i + 1) as f64 * h, eps))
        .sum()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn alpha(prior: &MaskingPrior, n: usize, k: usize) -> f64 {
    prior.log_alpha(n, k).exp()
}

#[test]
fn uniform_alpha_matches_factorial_formula_and_quadrature() {
    let prior = MaskingPrior::Uniform;
    for n in 0..=30 {
        for k in 0..=n {
            let closed = factorial(n - k) * factorial(k) / factorial(n + 1);
            let got = alpha(&prior, n, k);
            assert!((got - closed).abs() <= 1e-12 * closed, "n={n} k={k}: {got} vs {closed}");
            let quad = alpha_by_quadrature(n, k, 0.0, 1.0);
            assert!((got - quad).abs() <= 1e-8 * closed, "n={n} k={k}: {got} vs quadrature {quad}");
        }
    }
}

#[test]
fn truncated_alpha_matches_quadrature() {
    for (a, b) in [(0.2, 0.8), (0.0, 0.5), (0.1, 0.15)] {
        let prior = MaskingPrior::truncated_uniform(a, b).unwrap();
        for n in 0..=30 {
            for k in 0..=n {
                let got = alpha(&prior, n, k);
                let quad = alpha_by_quadrature(n, k, a, b);
                assert!((got - quad).abs() <= 1e-8 * quad.abs().max(1e-300), "[{a},{b}] n={n} k={k}: {got} vs {quad}");
            }
        }
    }
}

#[test]
fn point_mass_alpha_is_binomial_term() {
    let prior = MaskingPrior::point_mass(0.15).unwrap();
    for n in 0..=30 {
        for k in 0..=n {
            let want = 0.15f64.powi(k as i32) * 0.85f64.powi((n - k) as i32);
            assert!((alpha(&prior, n, k) - want).abs() <= 1e-13 * want);
        }
    }
}

#[test]
fn pattern_probabilities_sum_to_one() {
    let priors = [
        MaskingPrior::Uniform,
        MaskingPrior::point_mass(0.15).unwrap(),
        MaskingPrior::truncated_uniform(0.2, 0.8).unwrap(),
    ];
    for prior in &priors {
        for n in 0..=12 {
            let total: f64 = enumerate_masks(n)
                .unwrap()
                .iter()
                .map(|m| mask_probability(m, prior).alpha())
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "{prior:?} n={n}: {total}");
        }
    }
}

/// Upper 0.001 quantile of chi-square with 10 degrees of freedom.
const CHI2_10_999: f64 = 29.588;

#[test]
fn sampled_mask_size_is_uniform_under_uniform_prior() {
    let n = 10;
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 11];
    for _ in 0..draws {
        let r = MaskingPrior::Uniform.sample_ratio(&mut rng);
        counts[sample_mask(r, &mut rng, &[false; 10]).k()] += 1;
    }
    let expected = draws as f64 / (n + 1) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_10_999, "chi-square {chi2} with counts {counts:?}");
}

proptest! {
    #[test]
    fn pads_are_never_masked(pads in proptest::collection::vec(any::<bool>(), 0..40), r in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_mask(r, &mut rng, &pads);
        prop_assert_eq!(m.len(), pads.len());
        for p in m.positions() {
            prop_assert!(!pads[*p]);
        }
        prop_assert_eq!(m.k(), m.positions().len());
    }

    #[test]
    fn uniform_alpha_is_symmetric(n in 0usize..60, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as usize;
        let a = MaskingPrior::Uniform.log_alpha(n, k);
        let b = MaskingPrior::Uniform.log_alpha(n, n - k);
        prop_assert!((a - b).abs() < 1e-10);
    }
}
