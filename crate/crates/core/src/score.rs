//! Nonparametric scan statistics: likelihood-ratio scores for an excess of
//! significant p-values, the goodness-of-fit transform family, and the
//! per-cell additive decomposition used by the recovery diagnostics.
//!
//! All scores are functions of the sufficient statistics `(N_alpha, N)` of
//! a subpopulation at a significance level `alpha`: the total significance
//! mass and the number of p-value ranges. The default statistics are
//! one-sided, scoring zero unless `N_alpha > alpha * N` (the scan targets a
//! surplus of low p-values); unclamped variants are provided for scoring a
//! fixed subset symmetrically.

use serde::{Deserialize, Serialize};

use crate::data::{CellTable, Subpopulation};
use crate::error::{Error, Result};
use crate::reference::{candidate_alphas, significance_mass};

/// Floor for logarithm arguments.
const LOG_FLOOR: f64 = 1e-300;
/// Significance levels are confined to this band.
const ALPHA_BAND: (f64, f64) = (1e-6, 1.0 - 1e-6);

fn guard_alpha(alpha: f64) -> f64 {
    alpha.clamp(ALPHA_BAND.0, ALPHA_BAND.1)
}

fn ln_floored(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// The score statistic to maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// Berk-Jones: binomial likelihood ratio, `N * KL(N_alpha/N || alpha)`.
    #[default]
    Bj,
    /// Normal approximation: `(N_alpha - N alpha)^2 / (2 N alpha (1-alpha))`.
    Na,
    /// Kolmogorov-Smirnov transform of NA.
    Ks,
    /// Cramer-von Mises transform of NA.
    Cvm,
    /// Higher Criticism transform of NA.
    Hc,
    /// Anderson-Darling transform of NA.
    Ad,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::Bj,
        ScoreKind::Na,
        ScoreKind::Ks,
        ScoreKind::Cvm,
        ScoreKind::Hc,
        ScoreKind::Ad,
    ];

    /// Score at fixed `alpha` from subset sufficient statistics.
    pub fn evaluate(self, n_alpha: f64, n_total: f64, alpha: f64) -> f64 {
        match self {
            ScoreKind::Bj => score_bj(n_alpha, n_total, alpha),
            ScoreKind::Na => score_na(n_alpha, n_total, alpha),
            transform => score_transform(transform, score_na(n_alpha, n_total, alpha), alpha),
        }
    }

    /// Per-unit divergence between the observed significant proportion and
    /// `alpha` (zero under the one-sided clamp). For the NA transforms this
    /// is the underlying NA divergence.
    pub fn divergence(self, n_alpha: f64, n_total: f64, alpha: f64) -> f64 {
        if n_total <= 0.0 {
            return 0.0;
        }
        match self {
            ScoreKind::Bj => score_bj(n_alpha, n_total, alpha) / n_total,
            _ => score_na(n_alpha, n_total, alpha) / n_total,
        }
    }
}

/// Normal-approximation log-likelihood ratio, one-sided.
pub fn score_na(n_alpha: f64, n_total: f64, alpha: f64) -> f64 {
    if n_total <= 0.0 {
        return 0.0;
    }
    let alpha = guard_alpha(alpha);
    if n_alpha <= alpha * n_total {
        return 0.0;
    }
    let excess = n_alpha - n_total * alpha;
    excess * excess / (2.0 * n_total * alpha * (1.0 - alpha))
}

/// NA statistic without the one-sided clamp: deficits of significant
/// p-values score symmetrically.
pub fn score_na_two_sided(n_alpha: f64, n_total: f64, alpha: f64) -> f64 {
    if n_total <= 0.0 {
        return 0.0;
    }
    let alpha = guard_alpha(alpha);
    let excess = n_alpha - n_total * alpha;
    excess * excess / (2.0 * n_total * alpha * (1.0 - alpha))
}

fn kl_divergence(p: f64, alpha: f64) -> f64 {
    let mut kl = 0.0;
    if p > 0.0 {
        kl += p * (ln_floored(p) - ln_floored(alpha));
    }
    if p < 1.0 {
        kl += (1.0 - p) * (ln_floored(1.0 - p) - ln_floored(1.0 - alpha));
    }
    kl
}

/// Berk-Jones log-likelihood ratio, one-sided.
pub fn score_bj(n_alpha: f64, n_total: f64, alpha: f64) -> f64 {
    if n_total <= 0.0 {
        return 0.0;
    }
    let alpha = guard_alpha(alpha);
    if n_alpha <= alpha * n_total {
        return 0.0;
    }
    n_total * kl_divergence((n_alpha / n_total).min(1.0), alpha)
}

/// BJ statistic without the one-sided clamp.
pub fn score_bj_two_sided(n_alpha: f64, n_total: f64, alpha: f64) -> f64 {
    if n_total <= 0.0 {
        return 0.0;
    }
    let alpha = guard_alpha(alpha);
    n_total * kl_divergence((n_alpha / n_total).clamp(0.0, 1.0), alpha)
}

/// Deterministic transforms mapping the NA score to the other
/// goodness-of-fit statistics at the same `alpha`.
///
/// `Na` passes through unchanged. Panics on `Bj`, which is not an NA
/// transform.
pub fn score_transform(kind: ScoreKind, na_score: f64, alpha: f64) -> f64 {
    let alpha = guard_alpha(alpha);
    match kind {
        ScoreKind::Na => na_score,
        ScoreKind::Ks => (2.0 * alpha * (1.0 - alpha) * na_score).sqrt(),
        ScoreKind::Cvm => 2.0 * alpha * (1.0 - alpha) * na_score,
        ScoreKind::Hc => (2.0 * na_score).sqrt(),
        ScoreKind::Ad => 2.0 * na_score,
        ScoreKind::Bj => panic!("Berk-Jones is not a transform of the NA score"),
    }
}

/// A score together with the significance level attaining it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredAlpha {
    pub alpha: f64,
    pub score: f64,
    /// Per-unit divergence at `alpha`; `score = n_total * mu_nate` for the
    /// likelihood-ratio statistics.
    pub mu_nate: f64,
}

impl ScoredAlpha {
    pub fn zero(alpha: f64) -> Self {
        Self { alpha, score: 0.0, mu_nate: 0.0 }
    }
}

/// Maximizes `F_alpha(S)` over the candidate significance levels of `sub`'s
/// p-value ranges within the window, ties broken toward smaller alpha.
///
/// A subpopulation containing no ranges scores zero at `alpha_min`.
pub fn max_over_alpha(
    sub: &Subpopulation,
    table: &CellTable,
    kind: ScoreKind,
    alpha_min: f64,
    alpha_max: f64,
) -> Result<ScoredAlpha> {
    check_window(alpha_min, alpha_max)?;
    let ranges: Vec<_> = table.ranges_in(sub).collect();
    if ranges.is_empty() {
        return Ok(ScoredAlpha::zero(alpha_min));
    }
    let n_total = ranges.len() as f64;
    let mut best = ScoredAlpha::zero(alpha_min);
    let mut best_set = false;
    for alpha in candidate_alphas(ranges.iter().copied(), alpha_min, alpha_max) {
        let n_alpha: f64 = ranges.iter().map(|r| significance_mass(r, alpha)).sum();
        let score = kind.evaluate(n_alpha, n_total, alpha);
        if !best_set || score > best.score {
            best = ScoredAlpha { alpha, score, mu_nate: kind.divergence(n_alpha, n_total, alpha) };
            best_set = true;
        }
    }
    Ok(best)
}

pub(crate) fn check_window(alpha_min: f64, alpha_max: f64) -> Result<()> {
    if !(alpha_min > 0.0 && alpha_min < alpha_max && alpha_max < 1.0) {
        return Err(Error::InvalidAlphaWindow { alpha_min, alpha_max });
    }
    Ok(())
}

/// Null and alternative quantile parameters of the additive decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Per-cell contribution to the conditioned score `F_{alpha,beta}(S)`:
/// a linear function `C1(alpha,beta) * N_alpha(x) + C2(alpha,beta) * N(x)`.
///
/// Summed over the cells of `S` and maximized over `beta`, this recovers
/// the subset score; the maximum over `beta` sits at `N_alpha(S)/N(S)`.
/// Defined for the likelihood-ratio statistics only.
pub fn omega(kind: ScoreKind, params: OmegaParams, n_alpha: f64, n_total: f64) -> f64 {
    let alpha = guard_alpha(params.alpha);
    let beta = params.beta;
    match kind {
        ScoreKind::Na => {
            let c1 = (beta - alpha) / (alpha * (1.0 - alpha));
            let c2 = (alpha * alpha - beta * beta) / (2.0 * alpha * (1.0 - alpha));
            c1 * n_alpha + c2 * n_total
        }
        ScoreKind::Bj => {
            let c1 = ln_floored(beta * (1.0 - alpha)) - ln_floored(alpha * (1.0 - beta));
            let c2 = ln_floored(1.0 - beta) - ln_floored(1.0 - alpha);
            c1 * n_alpha + c2 * n_total
        }
        other => panic!("omega decomposition is defined for BJ and NA, not {other:?}"),
    }
}

/// Roots in `beta` of the NA omega function for a cell with significant
/// proportion `beta_mle`: `(alpha, 2 * beta_mle - alpha)`.
pub fn na_beta_roots(alpha: f64, beta_mle: f64) -> (f64, f64) {
    debug_assert!(beta_mle >= alpha, "roots are characterized for beta_mle >= alpha");
    (alpha, 2.0 * beta_mle - alpha)
}
