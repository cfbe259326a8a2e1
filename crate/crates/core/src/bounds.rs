//! Membership-leakage bounds derived from GNQ scores.
//!
//! All entropies and informations are in bits. The per-iteration leakage of
//! example `j` is
//!
//! ```text
//! I_ij = 1/2 [ log2(1 + GNQ_ij) - (N_t/N) log2(1 + kappa GNQ_ij) ]
//! ```
//!
//! and the leakage over a run is bounded by the sum of the per-iteration
//! terms. Fano's inequality then turns `H[T_j] - I_j` into a lower bound on
//! the error probability of any membership attacker.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::sampling::{indicator_moments, SamplingConfig};

/// Which variance ratios feed the per-iteration leakage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "regime")]
pub enum LeakageRegime {
    /// Large-population limit: only `kappa` survives.
    Asymptotic,
    /// Finite-population variance ratios, including the `(ratio)^{N_p}`
    /// prefactors. Not anchored at zero for `GNQ = 0`.
    ExactRatio { n_params: usize },
}

/// `-p log2 p - (1-p) log2 (1-p)`, with `H(0) = H(1) = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Prior uncertainty `H[T_j]` about one pool point's membership.
pub fn prior_entropy(n_train: usize, n_total: usize) -> Result<f64> {
    if n_total == 0 || n_train > n_total {
        return Err(AuditError::Domain(format!(
            "need 0 <= n_train <= n_total with n_total > 0, got {n_train} / {n_total}"
        )));
    }
    Ok(binary_entropy(n_train as f64 / n_total as f64))
}

/// Per-iteration leakage in the large-population regime.
pub fn per_iteration_leakage(gnq: f64, cfg: &SamplingConfig) -> Result<f64> {
    let moments = indicator_moments(cfg)?;
    Ok(asymptotic_leakage(gnq, cfg.train_fraction(), moments.kappa))
}

pub(crate) fn asymptotic_leakage(gnq: f64, train_fraction: f64, kappa: f64) -> f64 {
    0.5 * ((1.0 + gnq).log2() - train_fraction * (1.0 + kappa * gnq).log2())
}

/// Per-iteration leakage with the finite-population variance ratios.
///
/// Returns 0 when `N_t = N` since membership is then certain.
pub fn per_iteration_leakage_exact(gnq: f64, cfg: &SamplingConfig, n_params: usize) -> Result<f64> {
    let moments = indicator_moments(cfg)?;
    if cfg.n_train == cfg.n_total {
        return Ok(0.0);
    }
    let np = n_params as f64;
    let first = np * moments.ratio_unconditional_to_out().log2() + (1.0 + gnq).log2();
    let second =
        np * moments.ratio_in_to_out().log2() + (1.0 + moments.ratio_self_to_in() * gnq).log2();
    Ok(0.5 * (first - cfg.train_fraction() * second))
}

pub fn per_iteration_leakage_in(
    gnq: f64,
    cfg: &SamplingConfig,
    regime: LeakageRegime,
) -> Result<f64> {
    match regime {
        LeakageRegime::Asymptotic => per_iteration_leakage(gnq, cfg),
        LeakageRegime::ExactRatio { n_params } => per_iteration_leakage_exact(gnq, cfg, n_params),
    }
}

/// Differential entropies of the batch gradient, marginal and conditioned on
/// the membership of example `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyTerms {
    pub marginal: f64,
    pub given_out: f64,
    pub given_in: f64,
}

/// `H - H_0 - (N_t/N)(H_1 - H_0)`, the conditional mutual information written
/// through the two conditional entropies.
pub fn per_iteration_leakage_general(terms: EntropyTerms, cfg: &SamplingConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(
        terms.marginal
            - terms.given_out
            - cfg.train_fraction() * (terms.given_in - terms.given_out),
    )
}

pub fn total_leakage(per_iter: &[f64]) -> f64 {
    per_iter.iter().sum()
}

/// Inverse of the binary entropy on `[0, 1/2]`, by bisection to `1e-12`.
pub fn inverse_binary_entropy(h: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&h) {
        return Err(AuditError::Domain(format!(
            "binary entropy must lie in [0, 1], got {h}"
        )));
    }
    if h == 0.0 {
        return Ok(0.0);
    }
    if h == 1.0 {
        return Ok(0.5);
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if binary_entropy(mid) < h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoBound {
    pub fano_entropy_bits: f64,
    pub pe_lower: f64,
    /// Leakage exceeds the prior: the bound carries no information.
    pub vacuous: bool,
}

/// Fano lower bound on the attacker's error probability.
pub fn fano_error_bound(prior_bits: f64, total_bits: f64) -> Result<FanoBound> {
    if !(0.0..=1.0).contains(&prior_bits) {
        return Err(AuditError::Domain(format!(
            "prior entropy must lie in [0, 1], got {prior_bits}"
        )));
    }
    // written this way so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(total_bits >= 0.0) {
        return Err(AuditError::Domain(format!(
            "leakage must be non-negative, got {total_bits}"
        )));
    }
    let raw = prior_bits - total_bits;
    let fano_entropy_bits = raw.clamp(0.0, 1.0);
    Ok(FanoBound {
        fano_entropy_bits,
        pe_lower: inverse_binary_entropy(fano_entropy_bits)?,
        vacuous: raw <= 0.0 && total_bits > 0.0,
    })
}

/// Leakage summary for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageBound {
    pub example: usize,
    pub prior_entropy_bits: f64,
    pub per_iteration_bits: Vec<f64>,
    pub total_bits: f64,
    pub fano_entropy_bits: f64,
    pub pe_lower: f64,
    pub bound_vacuous: bool,
}

impl LeakageBound {
    /// Builds the bound from the example's recorded per-iteration scores.
    pub fn from_gnq(
        example: usize,
        gnq_per_iter: &[f64],
        cfg: &SamplingConfig,
        regime: LeakageRegime,
    ) -> Result<Self> {
        let prior = prior_entropy(cfg.n_train, cfg.n_total)?;
        let per_iteration_bits = gnq_per_iter
            .iter()
            .map(|&g| per_iteration_leakage_in(g, cfg, regime))
            .collect::<Result<Vec<_>>>()?;
        let total_bits = total_leakage(&per_iteration_bits);
        // the exact-ratio regime can go negative; Fano only needs a non-negative leakage
        let fano = fano_error_bound(prior, total_bits.max(0.0))?;
        Ok(LeakageBound {
            example,
            prior_entropy_bits: prior,
            per_iteration_bits,
            total_bits,
            fano_entropy_bits: fano.fano_entropy_bits,
            pe_lower: fano.pe_lower,
            bound_vacuous: fano.vacuous,
        })
    }
}
