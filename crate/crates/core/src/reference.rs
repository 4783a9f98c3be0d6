//! Per-profile empirical reference distributions and empirical p-value
//! ranges for treated outcomes.
//!
//! A treated outcome is compared against the control outcomes sharing its
//! covariate profile. Rather than a point p-value, the comparison yields a
//! half-open range `(p_min, p_max]`: a uniform draw within the range is
//! exactly Uniform(0,1) in finite samples when treatment and control
//! outcomes are exchangeable, which is what downstream significance-mass
//! accounting relies on.

use serde::{Deserialize, Serialize};

/// Which tail of the reference distribution counts as extreme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sidedness {
    /// Large outcomes are extreme.
    Upper,
    /// Small outcomes are extreme.
    Lower,
    /// Either tail is extreme (doubled min-tail, clamped to `(0, 1]`).
    #[default]
    Two,
}

/// Sorted control outcomes for one covariate profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution {
    outcomes: Vec<f64>,
}

impl ReferenceDistribution {
    /// Builds the reference from control outcomes (any order). Returns
    /// `None` when `outcomes` is empty: a profile without controls has no
    /// reference.
    pub fn new(mut outcomes: Vec<f64>) -> Option<Self> {
        if outcomes.is_empty() {
            return None;
        }
        outcomes.sort_unstable_by(f64::total_cmp);
        Some(Self { outcomes })
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Empirical CDF at `y`: fraction of controls `<= y`.
    pub fn cdf(&self, y: f64) -> f64 {
        let below_or_eq = self.outcomes.partition_point(|&c| c <= y);
        below_or_eq as f64 / self.outcomes.len() as f64
    }

    /// Number of controls strictly greater than, equal to, and strictly
    /// less than `y`.
    fn tail_counts(&self, y: f64) -> (usize, usize, usize) {
        let lt = self.outcomes.partition_point(|&c| c < y);
        let le = self.outcomes.partition_point(|&c| c <= y);
        let eq = le - lt;
        let gt = self.outcomes.len() - le;
        (gt, eq, lt)
    }
}

/// Empirical p-value range `(p_min, p_max]` for one treated outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PValueRange {
    pub p_min: f64,
    pub p_max: f64,
}

impl PValueRange {
    /// The uninformative full range, assigned to treated units that have no
    /// reference when such units are kept.
    pub const FULL: PValueRange = PValueRange { p_min: 0.0, p_max: 1.0 };

    pub fn new(p_min: f64, p_max: f64) -> Self {
        debug_assert!(
            (0.0..1.0).contains(&p_min) && p_min < p_max && p_max <= 1.0,
            "invalid p-value range ({p_min}, {p_max}]"
        );
        Self { p_min, p_max }
    }

    pub fn width(&self) -> f64 {
        self.p_max - self.p_min
    }
}

/// Converts a treated outcome into its empirical p-value range.
///
/// With `G` controls beyond `y` in the extreme direction and `E` controls
/// tied with `y`, the range is `(G/(n+1), (G+E+1)/(n+1)]` where `n` is the
/// control count. The `n+1` denominator makes a uniform draw within the
/// range exactly Uniform(0,1) under exchangeability; ties widen the range
/// instead of forcing an arbitrary resolution. Two-sided ranges double the
/// smaller tail and clamp at 1.
pub fn p_value_range(reference: &ReferenceDistribution, y: f64, sidedness: Sidedness) -> PValueRange {
    let (gt, eq, lt) = reference.tail_counts(y);
    let denom = (reference.len() + 1) as f64;
    let one_sided = |beyond: usize| {
        PValueRange::new(beyond as f64 / denom, (beyond + eq + 1) as f64 / denom)
    };
    match sidedness {
        Sidedness::Upper => one_sided(gt),
        Sidedness::Lower => one_sided(lt),
        Sidedness::Two => {
            let tail = one_sided(gt.min(lt));
            PValueRange::new(2.0 * tail.p_min, (2.0 * tail.p_max).min(1.0))
        }
    }
}

/// Probability mass of the range lying at or below the significance level
/// `alpha`: `clamp((alpha - p_min) / (p_max - p_min), 0, 1)`.
pub fn significance_mass(range: &PValueRange, alpha: f64) -> f64 {
    ((alpha - range.p_min) / range.width()).clamp(0.0, 1.0)
}

/// Significance thresholds worth evaluating when maximizing over
/// `alpha in [alpha_min, alpha_max]`.
///
/// Returns the distinct range endpoints falling inside the window plus the
/// window bounds themselves, sorted ascending. Between consecutive
/// endpoints the total significance mass is linear in alpha, and every
/// score function in [`crate::score`] restricted to such a segment attains
/// its maximum at a segment end, so this grid maximizes exactly.
pub fn candidate_alphas(
    ranges: impl IntoIterator<Item = PValueRange>,
    alpha_min: f64,
    alpha_max: f64,
) -> Vec<f64> {
    let mut alphas = vec![alpha_min, alpha_max];
    for r in ranges {
        for endpoint in [r.p_min, r.p_max] {
            if endpoint >= alpha_min && endpoint <= alpha_max {
                alphas.push(endpoint);
            }
        }
    }
    alphas.sort_unstable_by(f64::total_cmp);
    alphas.dedup();
    alphas
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn reference(xs: &[f64]) -> ReferenceDistribution {
        ReferenceDistribution::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn upper_range_basic() {
        // G = 1 (only 4 exceeds 3.5), E = 0.
        let r = p_value_range(&reference(&[1.0, 2.0, 3.0, 4.0]), 3.5, Sidedness::Upper);
        assert_relative_eq!(r.p_min, 0.2);
        assert_relative_eq!(r.p_max, 0.4);
    }

    #[test]
    fn upper_range_maximal_outcome() {
        let r = p_value_range(&reference(&[1.0, 2.0, 3.0, 4.0]), 5.0, Sidedness::Upper);
        assert_relative_eq!(r.p_min, 0.0);
        assert_relative_eq!(r.p_max, 0.2);
    }

    #[test]
    fn upper_range_tie_widens() {
        // G = 2, E = 1: the tie spreads the range across (2/5, 4/5].
        let r = p_value_range(&reference(&[1.0, 2.0, 3.0, 4.0]), 2.0, Sidedness::Upper);
        assert_relative_eq!(r.p_min, 0.4);
        assert_relative_eq!(r.p_max, 0.8);
    }

    #[test]
    fn lower_mirrors_upper() {
        let r = p_value_range(&reference(&[1.0, 2.0, 3.0, 4.0]), 0.5, Sidedness::Lower);
        assert_relative_eq!(r.p_min, 0.0);
        assert_relative_eq!(r.p_max, 0.2);
    }

    #[test]
    fn two_sided_doubles_min_tail() {
        let ctl = reference(&[1.0, 2.0, 3.0, 4.0]);
        // y beyond the top: upper tail G=0 is the min tail.
        let r = p_value_range(&ctl, 5.0, Sidedness::Two);
        assert_relative_eq!(r.p_min, 0.0);
        assert_relative_eq!(r.p_max, 0.4);
        // y dead center: both tails G=L=2, doubled range clamps at 1.
        let r = p_value_range(&ctl, 2.5, Sidedness::Two);
        assert_relative_eq!(r.p_min, 0.8);
        assert_relative_eq!(r.p_max, 1.0);
    }

    #[test]
    fn significance_mass_examples() {
        let r = PValueRange::new(0.2, 0.4);
        assert_relative_eq!(significance_mass(&r, 0.3), 0.5);
        assert_relative_eq!(significance_mass(&r, 0.5), 1.0);
        assert_relative_eq!(significance_mass(&r, 0.1), 0.0);
    }

    #[test]
    fn candidate_alphas_collects_endpoints_in_window() {
        let ranges = vec![PValueRange::new(0.0, 0.05), PValueRange::new(0.05, 0.10)];
        let alphas = candidate_alphas(ranges, 0.01, 0.2);
        assert_eq!(alphas, vec![0.01, 0.05, 0.10, 0.2]);
    }

    #[test]
    fn candidate_alphas_empty_and_outside() {
        assert_eq!(candidate_alphas(vec![], 0.05, 0.1), vec![0.05, 0.1]);
        let far = vec![PValueRange::new(0.5, 0.9)];
        assert_eq!(candidate_alphas(far, 0.05, 0.1), vec![0.05, 0.1]);
    }

    /// Under exchangeable arms, a uniform draw inside each unit's range must
    /// be Uniform(0,1); checked with a Dvoretzky-Kiefer-Wolfowitz band.
    #[test]
    fn null_pvalues_are_uniform() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for sided in [Sidedness::Upper, Sidedness::Lower, Sidedness::Two] {
            let mut pvals = Vec::new();
            for _ in 0..4000 {
                let controls: Vec<f64> = (0..7).map(|_| rng.gen::<f64>()).collect();
                let y: f64 = rng.gen();
                let r = p_value_range(&ReferenceDistribution::new(controls).unwrap(), y, sided);
                pvals.push(r.p_min + rng.gen::<f64>() * r.width());
            }
            pvals.sort_unstable_by(f64::total_cmp);
            let n = pvals.len() as f64;
            let ks = pvals
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let hi = (i + 1) as f64 / n - p;
                    let lo = p - i as f64 / n;
                    hi.max(lo)
                })
                .fold(0.0_f64, f64::max);
            // DKW: P(KS > eps) <= 2 exp(-2 n eps^2); eps for a 1e-6 level.
            let eps = ((2.0_f64 / 1e-6).ln() / (2.0 * n)).sqrt();
            assert!(ks < eps, "{sided:?}: KS {ks} above DKW band {eps}");
        }
    }

    #[test]
    fn per_range_mass_matches_window_width_in_expectation() {
        // Total mass in [a, b] equals (b - a) * count under H0 on average.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (0.1, 0.3);
        let n = 20_000;
        let mut total = 0.0;
        for _ in 0..n {
            let controls: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
            let y: f64 = rng.gen();
            let r = p_value_range(&ReferenceDistribution::new(controls).unwrap(), y, Sidedness::Two);
            total += significance_mass(&r, b) - significance_mass(&r, a);
        }
        assert_relative_eq!(total / n as f64, b - a, epsilon = 0.01);
    }

    proptest! {
        /// Negating all outcomes swaps upper and lower ranges exactly.
        #[test]
        fn negation_swaps_sidedness(
            controls in proptest::collection::vec(-50i32..50, 1..12),
            y in -50i32..50,
        ) {
            let ctl: Vec<f64> = controls.iter().map(|&c| c as f64).collect();
            let neg: Vec<f64> = ctl.iter().map(|&c| -c).collect();
            let up = p_value_range(&ReferenceDistribution::new(ctl.clone()).unwrap(), y as f64, Sidedness::Upper);
            let lo = p_value_range(&ReferenceDistribution::new(neg).unwrap(), -(y as f64), Sidedness::Lower);
            prop_assert_eq!(up, lo);
        }

        /// Mass is monotone in alpha and hits the extremes.
        #[test]
        fn mass_monotone(p_min in 0.0..0.98f64, w in 0.005..0.5f64, a1 in 0.001..0.999f64, a2 in 0.001..0.999f64) {
            let r = PValueRange::new(p_min, (p_min + w).min(1.0));
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(significance_mass(&r, lo) <= significance_mass(&r, hi));
            prop_assert_eq!(significance_mass(&r, 1.0), 1.0);
        }
    }
}
