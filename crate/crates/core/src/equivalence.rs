//! Exact check that the uniform-prior masked objective and the
//! autoregressive objective averaged over all orders coincide.
//!
//! Summing `Σ_t log p(x_{σ_t} | revealed)` over every order `σ` visits each
//! `(masked set Π, next position π ∈ Π)` conditional exactly
//! `(N-K)! (K-1)!` times, `K = |Π|`. With `α_M = (N-K)! K! / (N+1)!` this gives
//!
//! `Σ_σ Σ_t log p = (N+1)! · Σ_M α_M (1/K) Σ_k log p(x_{π_k} | X_{-Π})`,
//!
//! or equivalently `mean_σ Σ_t log p = (N+1) · Σ_M α_M (1/K) Σ_k log p`.

use std::collections::{BTreeMap, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskingPrior;
use crate::objectives::{
    aplm_mean_log_likelihood, permutations, pmlm_exact_log_likelihood, MAX_EXACT_APLM_LEN,
};
use crate::sequence::TokenSequence;
use crate::transformer::Transformer;

/// Default absolute tolerance on the identity gap.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;
/// Longest sequence the duplication audit enumerates.
pub const MAX_AUDIT_LEN: usize = 7;

pub fn factorial(n: u64) -> u128 {
    (1..=n as u128).product()
}

/// Number of orders that score `log p(x_π | X_{-Π})` for one `(Π, π)` with `|Π| = k`.
pub fn duplication_factor(n: usize, k: usize) -> u128 {
    assert!(k >= 1 && k <= n);
    factorial((n - k) as u64) * factorial((k - 1) as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicationEntry {
    pub n: usize,
    pub k: usize,
    /// `(N-K)! (K-1)!`
    pub expected: u128,
    pub observed_min: u128,
    pub observed_max: u128,
    /// Distinct `(Π, π)` pairs with `|Π| = k` that were visited.
    pub groups: usize,
    pub matches: bool,
}

/// Groups every step of every order of `0..n` by (still-hidden set, position
/// revealed next) and compares the group sizes with `(N-K)! (K-1)!`.
pub fn duplication_audit(n: usize) -> Result<Vec<DuplicationEntry>> {
    if n > MAX_AUDIT_LEN {
        return Err(Error::EnumerationLimit {
            what: "duplication audit",
            n,
            limit: MAX_AUDIT_LEN,
        });
    }
    let mut counts: HashMap<(u32, usize), u128> = HashMap::new();
    for order in permutations(n) {
        let mut hidden: u32 = (1u32 << n) - 1;
        for &pos in &order {
            *counts.entry((hidden, pos)).or_default() += 1;
            hidden &= !(1 << pos);
        }
    }
    let mut by_k: BTreeMap<usize, Vec<u128>> = BTreeMap::new();
    for ((hidden, _), c) in counts {
        by_k.entry(hidden.count_ones() as usize).or_default().push(c);
    }
    Ok((1..=n)
        .map(|k| {
            let counts = by_k.remove(&k).unwrap_or_default();
            let expected = duplication_factor(n, k);
            let observed_min = counts.iter().copied().min().unwrap_or(0);
            let observed_max = counts.iter().copied().max().unwrap_or(0);
            // every (Π, π ∈ Π) pair must appear: C(n, k) · k of them
            let pairs = (binomial(n, k) * k as u128) as usize;
            DuplicationEntry {
                n,
                k,
                expected,
                observed_min,
                observed_max,
                groups: counts.len(),
                matches: observed_min == expected && observed_max == expected && counts.len() == pairs,
            }
        })
        .collect())
}

fn binomial(n: usize, k: usize) -> u128 {
    factorial(n as u64) / (factorial(k as u64) * factorial((n - k) as u64))
}

/// `∫_0^1 r^K (1-r)^(N-K) dr` as an exact rational, by expanding
/// `(1-r)^(N-K)` binomially and integrating term by term.
pub fn beta_integral_exact(n: usize, k: usize) -> BigRational {
    let m = n - k;
    let mut total = BigRational::zero();
    let mut coeff = BigInt::one();
    for j in 0..=m {
        let term = BigRational::new(coeff.clone(), BigInt::from(k + j + 1));
        if j % 2 == 0 {
            total += term;
        } else {
            total -= term;
        }
        coeff = coeff * BigInt::from(m - j) / BigInt::from(j + 1);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetaIdentityEntry {
    pub n: usize,
    pub k: usize,
    pub holds: bool,
}

/// Checks `B(N-K+1, K+1) · (N+1)! == (N-K)! · K!` exactly for all `0 ≤ K ≤ N ≤ max_n`.
pub fn beta_identity(max_n: usize) -> Vec<BetaIdentityEntry> {
    let fact = |v: usize| BigInt::from(factorial(v as u64));
    let mut out = Vec::new();
    for n in 0..=max_n {
        for k in 0..=n {
            let lhs = beta_integral_exact(n, k) * BigRational::from_integer(fact(n + 1));
            let rhs = BigRational::from_integer(fact(n - k) * fact(k));
            out.push(BetaIdentityEntry { n, k, holds: lhs == rhs });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub n: usize,
    /// `-Σ_M α_M (1/K) Σ_k log p(x_{π_k} | X_{-Π})` under the uniform prior.
    pub pmlm_exact: f64,
    /// Mean over all `N!` orders of `Σ_t log p(x_{σ_t} | …)`.
    pub aplm_mean: f64,
    /// `(N+1)!`
    pub constant_c: u128,
    /// `N!`, the number of orders averaged in `aplm_mean`.
    pub num_orders: u128,
    /// `Σ_σ Σ_t log p / (N+1)!`, which should equal `-pmlm_exact`.
    pub aplm_sum_over_c: f64,
    /// `|(N+1) · (-pmlm_exact) - aplm_mean|`
    pub gap_mean_form: f64,
    /// `|(-pmlm_exact) - aplm_sum_over_c|`
    pub gap_c_form: f64,
    pub max_abs_gap: f64,
    pub tolerance: f64,
    pub duplication_audit: Vec<DuplicationEntry>,
    pub passed: bool,
}

pub fn verify_equivalence(model: &Transformer, x: &TokenSequence) -> Result<EquivalenceReport> {
    verify_equivalence_with_tolerance(model, x, EQUIVALENCE_TOLERANCE)
}

pub fn verify_equivalence_with_tolerance(
    model: &Transformer,
    x: &TokenSequence,
    tolerance: f64,
) -> Result<EquivalenceReport> {
    let n = x.len();
    if n > MAX_EXACT_APLM_LEN {
        return Err(Error::EnumerationLimit {
            what: "equivalence check",
            n,
            limit: MAX_EXACT_APLM_LEN,
        });
    }
    let pmlm_ll = pmlm_exact_log_likelihood(model, x, &MaskingPrior::Uniform)?;
    let aplm_mean = aplm_mean_log_likelihood(model, x)?;
    let constant_c = factorial(n as u64 + 1);
    let num_orders = factorial(n as u64);
    let aplm_sum_over_c = aplm_mean * num_orders as f64 / constant_c as f64;
    let gap_mean_form = ((n + 1) as f64 * pmlm_ll - aplm_mean).abs();
    let gap_c_form = (pmlm_ll - aplm_sum_over_c).abs();
    let max_abs_gap = gap_mean_form.max(gap_c_form);
    let duplication_audit = duplication_audit(n)?;
    let passed = max_abs_gap.is_finite()
        && max_abs_gap < tolerance
        && duplication_audit.iter().all(|e| e.matches);
    Ok(EquivalenceReport {
        n,
        pmlm_exact: -pmlm_ll,
        aplm_mean,
        constant_c,
        num_orders,
        aplm_sum_over_c,
        gap_mean_form,
        gap_c_form,
        max_abs_gap,
        tolerance,
        duplication_audit,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::MASK_ID;
    use crate::tensor::log_softmax;
    use crate::transformer::TransformerConfig;

    #[test]
    fn audit_five_choose_two() {
        let audit = duplication_audit(5).unwrap();
        let e = &audit[1];
        assert_eq!((e.n, e.k, e.expected), (5, 2, 6));
        assert_eq!((e.observed_min, e.observed_max), (6, 6));
        assert_eq!(e.groups, 20);
        assert!(audit.iter().all(|e| e.matches));
        assert!(duplication_audit(8).is_err());
    }

    #[test]
    fn exact_beta_integral_small_values() {
        assert_eq!(beta_integral_exact(2, 1), BigRational::new(1.into(), 6.into()));
        assert_eq!(beta_integral_exact(0, 0), BigRational::one());
        assert!(beta_identity(8).iter().all(|e| e.holds));
    }

    #[test]
    fn single_token_report() {
        let m = Transformer::with_init_std(TransformerConfig::tiny(12), 1, 0.5).unwrap();
        let x = TokenSequence::new(vec![7]);
        let r = verify_equivalence(&m, &x).unwrap();
        let lp = log_softmax(m.forward(&[MASK_ID]).unwrap().row(0))[7];
        assert!((r.pmlm_exact + lp / 2.0).abs() < 1e-13);
        assert!((r.aplm_sum_over_c - lp / 2.0).abs() < 1e-13);
        assert!(r.max_abs_gap < 1e-12);
        assert_eq!(r.constant_c, 2);
        assert!(r.passed);
    }

    #[test]
    fn gap_above_tolerance_fails_the_report() {
        let m = Transformer::with_init_std(TransformerConfig::tiny(12), 2, 0.5).unwrap();
        let x = TokenSequence::new(vec![3, 8, 5]);
        let r = verify_equivalence_with_tolerance(&m, &x, -1.0).unwrap();
        assert!(!r.passed);
    }
}
