//! Entropy-family computations used by tree growing, smoothing diagnostics
//! and perplexity reporting.
//!
//! All logarithms are base 2; entropies are reported in bits. The convention
//! `0·log₂0 = 0` is applied exactly rather than via limits.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Absolute tolerance for normalization checks.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// A discrete probability distribution over integer outcome ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: BTreeMap<u32, f64>,
}

impl Distribution {
    /// Builds a distribution, validating nonnegativity and normalization.
    pub fn new(probs: BTreeMap<u32, f64>) -> Result<Self> {
        let mut sum = 0.0;
        for (&id, &p) in &probs {
            if p < 0.0 || !p.is_finite() {
                return Err(Error::InvalidDistribution(format!(
                    "probability of outcome {id} is {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Distribution { probs })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        Self::new(pairs.into_iter().collect())
    }

    /// Uniform distribution over `0..n`.
    pub fn uniform(n: u32) -> Self {
        let p = 1.0 / f64::from(n);
        Distribution {
            probs: (0..n).map(|i| (i, p)).collect(),
        }
    }

    pub fn prob(&self, outcome: u32) -> f64 {
        self.probs.get(&outcome).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.probs.iter().map(|(&k, &v)| (k, v))
    }

    /// Number of outcomes carrying nonzero mass.
    pub fn support_size(&self) -> usize {
        self.probs.values().filter(|&&p| p > 0.0).count()
    }
}

/// A joint distribution over pairs of outcome ids.
#[derive(Debug, Clone)]
pub struct JointDistribution {
    probs: BTreeMap<(u32, u32), f64>,
}

impl JointDistribution {
    pub fn new(probs: BTreeMap<(u32, u32), f64>) -> Result<Self> {
        let mut sum = 0.0;
        for (&(x, y), &p) in &probs {
            if p < 0.0 || !p.is_finite() {
                return Err(Error::InvalidDistribution(format!(
                    "probability of pair ({x},{y}) is {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "joint probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(JointDistribution { probs })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = ((u32, u32), f64)>) -> Result<Self> {
        Self::new(pairs.into_iter().collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), f64)> + '_ {
        self.probs.iter().map(|(&k, &v)| (k, v))
    }

    /// Marginal over the first coordinate: p_X(x) = Σ_y p(x,y).
    pub fn marginal_x(&self) -> BTreeMap<u32, f64> {
        let mut m = BTreeMap::new();
        for (&(x, _), &p) in &self.probs {
            *m.entry(x).or_insert(0.0) += p;
        }
        m
    }

    /// Marginal over the second coordinate: p_Y(y) = Σ_x p(x,y).
    pub fn marginal_y(&self) -> BTreeMap<u32, f64> {
        let mut m = BTreeMap::new();
        for (&(_, y), &p) in &self.probs {
            *m.entry(y).or_insert(0.0) += p;
        }
        m
    }
}

#[inline]
fn plog2p(p: f64) -> f64 {
    if p > 0.0 {
        p * p.log2()
    } else {
        0.0
    }
}

/// H(X) = −Σ p(x) log₂ p(x), in bits.
pub fn entropy(d: &Distribution) -> f64 {
    -d.iter().map(|(_, p)| plog2p(p)).sum::<f64>()
}

/// 2^H(X): the average effective number of choices.
pub fn perplexity(d: &Distribution) -> f64 {
    entropy(d).exp2()
}

/// H(Y|X) = −Σ_{x,y} p(x,y) log₂ p(y|x).
pub fn conditional_entropy(j: &JointDistribution) -> f64 {
    let marg_x = j.marginal_x();
    let mut h = 0.0;
    for ((x, _), p) in j.iter() {
        if p > 0.0 {
            let px = marg_x[&x];
            h -= p * (p / px).log2();
        }
    }
    h
}

/// Entropy of a raw (not necessarily normalized) nonnegative weight vector,
/// computed over the normalized weights. Zero total weight gives 0 bits.
pub fn entropy_of_weights(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &w in weights {
        if w > 0.0 {
            let p = w / total;
            h -= plog2p(p);
        }
    }
    h
}

/// Cross entropy H(p,q) = −Σ p(x) log₂ q(x).
///
/// Requires q(x) > 0 wherever p(x) > 0.
pub fn cross_entropy(p: &Distribution, q: &Distribution) -> Result<f64> {
    let mut h = 0.0;
    for (x, px) in p.iter() {
        if px > 0.0 {
            let qx = q.prob(x);
            if qx <= 0.0 {
                return Err(Error::Domain(format!(
                    "q({x}) = 0 but p({x}) = {px} > 0"
                )));
            }
            h -= px * qx.log2();
        }
    }
    Ok(h)
}

/// Kullback-Leibler distance D(p‖q) = Σ p(x) log₂ (p(x)/q(x)).
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    let mut d = 0.0;
    for (x, px) in p.iter() {
        if px > 0.0 {
            let qx = q.prob(x);
            if qx <= 0.0 {
                return Err(Error::Domain(format!(
                    "q({x}) = 0 but p({x}) = {px} > 0"
                )));
            }
            d += px * (px / qx).log2();
        }
    }
    Ok(d)
}

/// I(X;Y) = D(p_XY ‖ p_X p_Y), in bits. Zero iff X and Y are independent.
pub fn mutual_information(j: &JointDistribution) -> f64 {
    let mx = j.marginal_x();
    let my = j.marginal_y();
    let mut mi = 0.0;
    for ((x, y), p) in j.iter() {
        if p > 0.0 {
            mi += p * (p / (mx[&x] * my[&y])).log2();
        }
    }
    mi
}
