//! Priors over the masking ratio, i.i.d. mask sampling, and the marginal
//! probability of a mask pattern once the ratio is integrated out.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Largest sequence length [`enumerate_masks`] accepts.
pub const MAX_ENUMERATED_MASK_LEN: usize = 16;

/// Distribution `p(r)` of the masking ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "PriorRepr")]
pub enum MaskingPrior {
    /// `r ~ U[0, 1]`.
    Uniform,
    /// `r = r0` always (fixed-ratio masking).
    PointMass { r0: f64 },
    /// `r ~ U[a, b]`.
    TruncatedUniform { a: f64, b: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PriorRepr {
    Uniform,
    PointMass { r0: f64 },
    TruncatedUniform { a: f64, b: f64 },
}

impl TryFrom<PriorRepr> for MaskingPrior {
    type Error = Error;

    fn try_from(r: PriorRepr) -> Result<Self> {
        match r {
            PriorRepr::Uniform => Ok(MaskingPrior::Uniform),
            PriorRepr::PointMass { r0 } => MaskingPrior::point_mass(r0),
            PriorRepr::TruncatedUniform { a, b } => MaskingPrior::truncated_uniform(a, b),
        }
    }
}

fn check_ratio(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidPrior(format!("{name} = {v} is outside [0, 1]")))
    }
}

impl MaskingPrior {
    pub fn point_mass(r0: f64) -> Result<Self> {
        check_ratio("r0", r0)?;
        Ok(MaskingPrior::PointMass { r0 })
    }

    pub fn truncated_uniform(a: f64, b: f64) -> Result<Self> {
        check_ratio("a", a)?;
        check_ratio("b", b)?;
        if a >= b {
            return Err(Error::InvalidPrior(format!("bounds require a < b, got a = {a}, b = {b}")));
        }
        Ok(MaskingPrior::TruncatedUniform { a, b })
    }

    /// Support `[lo, hi]` of the ratio.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            MaskingPrior::Uniform => (0.0, 1.0),
            MaskingPrior::PointMass { r0 } => (r0, r0),
            MaskingPrior::TruncatedUniform { a, b } => (a, b),
        }
    }

    pub fn mean(&self) -> f64 {
        let (lo, hi) = self.support();
        0.5 * (lo + hi)
    }

    pub fn variance(&self) -> f64 {
        let (lo, hi) = self.support();
        (hi - lo) * (hi - lo) / 12.0
    }

    pub fn sample_ratio<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MaskingPrior::PointMass { r0 } => r0,
            _ => {
                let (lo, hi) = self.support();
                lo + (hi - lo) * rng.random::<f64>()
            }
        }
    }

    /// `log ∫ r^K (1-r)^(N-K) p(r) dr` for a pattern with `k` of `n` positions masked.
    pub fn log_alpha(&self, n: usize, k: usize) -> f64 {
        assert!(k <= n, "k = {k} exceeds n = {n}");
        match *self {
            MaskingPrior::Uniform => log_beta_integral(n, k),
            MaskingPrior::PointMass { r0 } => log_bernoulli(n, k, r0),
            MaskingPrior::TruncatedUniform { a, b } => {
                log_integral_gauss_legendre(n, k, a, b) - (b - a).ln()
            }
        }
    }
}

/// `ln B(N-K+1, K+1) = ln((N-K)! K! / (N+1)!)`.
pub fn log_beta_integral(n: usize, k: usize) -> f64 {
    ln_gamma((n - k + 1) as f64) + ln_gamma((k + 1) as f64) - ln_gamma((n + 2) as f64)
}

fn log_bernoulli(n: usize, k: usize, r: f64) -> f64 {
    // 0 · ln 0 = 0
    let term = |count: usize, p: f64| if count == 0 { 0.0 } else { count as f64 * p.ln() };
    term(k, r) + term(n - k, 1.0 - r)
}

/// Nodes and weights of the `m`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> Vec<(f64, f64)> {
    let mut rule = Vec::with_capacity(m);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // P_m(x) and P'_m(x) by the three-term recurrence
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=m {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let pm = if m == 0 { 1.0 } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (x * pm - pm1) / (x * x - 1.0);
            let dx = pm / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.push((x, w));
    }
    rule
}

/// `log ∫_a^b r^K (1-r)^(N-K) dr`. The integrand is a degree-`N` polynomial,
/// so a rule with `N/2 + 1` nodes is exact; a few extra nodes are used anyway.
fn log_integral_gauss_legendre(n: usize, k: usize, a: f64, b: f64) -> f64 {
    let m = n / 2 + 4;
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let terms: Vec<f64> = gauss_legendre(m)
        .into_iter()
        .map(|(x, w)| {
            let r = mid + half * x;
            w.ln() + log_bernoulli(n, k, r)
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln() + half.ln()
}

/// Binary mask over a sequence together with its sorted masked positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskPattern {
    mask: Vec<bool>,
    positions: Vec<usize>,
}

impl MaskPattern {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let positions = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        MaskPattern { mask, positions }
    }

    pub fn from_positions(n: usize, positions: &[usize]) -> Result<Self> {
        let mut mask = vec![false; n];
        for &p in positions {
            if p >= n {
                return Err(Error::InvalidGeneration(format!("mask position {p} out of range for length {n}")));
            }
            mask[p] = true;
        }
        Ok(Self::from_mask(mask))
    }

    /// Pattern with every non-pad position masked.
    pub fn all(pad_flags: &[bool]) -> Self {
        Self::from_mask(pad_flags.iter().map(|&p| !p).collect())
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Number of masked positions.
    pub fn k(&self) -> usize {
        self.positions.len()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.mask[position]
    }
}

/// Log of the marginal pattern probability `α_M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskWeight {
    pub log_alpha: f64,
}

impl MaskWeight {
    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }
}

pub fn sample_ratio<R: Rng + ?Sized>(prior: &MaskingPrior, rng: &mut R) -> f64 {
    prior.sample_ratio(rng)
}

/// Masks each non-pad position independently with probability `r`.
pub fn sample_mask<R: Rng + ?Sized>(r: f64, rng: &mut R, pad_flags: &[bool]) -> MaskPattern {
    let mask = pad_flags
        .iter()
        .map(|&pad| !pad && rng.random::<f64>() < r)
        .collect();
    MaskPattern::from_mask(mask)
}

pub fn mask_probability(pattern: &MaskPattern, prior: &MaskingPrior) -> MaskWeight {
    MaskWeight {
        log_alpha: prior.log_alpha(pattern.len(), pattern.k()),
    }
}

/// All `2^n` patterns, ordered by their bitmask value (bit `i` = position `i`).
pub fn enumerate_masks(n: usize) -> Result<Vec<MaskPattern>> {
    if n > MAX_ENUMERATED_MASK_LEN {
        return Err(Error::EnumerationLimit {
            what: "mask enumeration",
            n,
            limit: MAX_ENUMERATED_MASK_LEN,
        });
    }
    Ok((0u32..(1 << n))
        .map(|bits| MaskPattern::from_mask((0..n).map(|i| bits >> i & 1 == 1).collect()))
        .collect())
}
