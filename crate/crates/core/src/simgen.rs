//! Semi-synthetic experiment generator and evaluation metrics: plants a
//! random rectangular subpopulation with a distributional treatment effect
//! in a base dataset, then measures detection power against regenerated
//! null datasets and subpopulation accuracy against the planted truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_cell_table, CovariateSchema, Record, Subpopulation, TableConfig};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::scan::{tess_scan, ScanConfig};

/// Family of the alternative outcome distribution for affected units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// `f1 = Normal(delta, 1)`: a shifted mean.
    MeanShift,
    /// `f1 = 1/2 Normal(-delta, 1) + 1/2 Normal(delta, 1)`: mean zero, but
    /// a clearly different distribution.
    SymmetricMixture,
}

/// Where covariate profiles and treatment assignments come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SimBase {
    /// `n` records with uniformly drawn value per covariate and fair-coin
    /// treatment assignment.
    Synthetic { n: usize, schema: CovariateSchema },
    /// Reuse real covariate rows and treatment labels; only outcomes are
    /// regenerated.
    FromRecords { records: Vec<Record>, schema: CovariateSchema },
}

impl SimBase {
    pub fn schema(&self) -> &CovariateSchema {
        match self {
            SimBase::Synthetic { schema, .. } => schema,
            SimBase::FromRecords { schema, .. } => schema,
        }
    }
}

/// Injection and protocol parameters for one simulation study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    /// Magnitude of the planted effect (the shift, or mixture separation).
    pub effect_magnitude: f64,
    /// Number of covariates whose value sets get restricted in the planted
    /// subpopulation.
    pub num_covs: usize,
    /// Probability each value of a restricted covariate is kept.
    pub value_prob: f64,
    pub alternative: Alternative,
    pub base: SimBase,
    pub replicates: usize,
    pub null_copies: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl SimSpec {
    fn validate(&self) -> Result<()> {
        let d = self.base.schema().d();
        if self.num_covs > d {
            return Err(Error::InvalidParameter(format!(
                "num_covs {} exceeds the {} covariates",
                self.num_covs, d
            )));
        }
        if !(self.value_prob > 0.0 && self.value_prob <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "value_prob must lie in (0,1], got {}",
                self.value_prob
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Draws the planted subpopulation: `num_covs` covariates chosen at random
/// keep each value with probability `value_prob` (at least one forced);
/// every other covariate keeps its full value set.
pub fn generate_affected_subpopulation(
    schema: &CovariateSchema,
    num_covs: usize,
    value_prob: f64,
    seed: u64,
) -> Result<Subpopulation> {
    if num_covs > schema.d() {
        return Err(Error::InvalidParameter(format!(
            "num_covs {} exceeds the {} covariates",
            num_covs,
            schema.d()
        )));
    }
    if !(value_prob > 0.0 && value_prob <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "value_prob must lie in (0,1], got {value_prob}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut covs: Vec<usize> = (0..schema.d()).collect();
    for i in 0..num_covs {
        let j = rng.gen_range(i..covs.len());
        covs.swap(i, j);
    }
    let selected = &covs[..num_covs];

    let mut sets = Vec::with_capacity(schema.d());
    for j in 0..schema.d() {
        let arity = schema.arity(j);
        if selected.contains(&j) {
            let mut kept: Vec<usize> =
                (0..arity).filter(|_| rng.gen_bool(value_prob)).collect();
            if kept.is_empty() {
                kept.push(rng.gen_range(0..arity));
            }
            sets.push(kept);
        } else {
            sets.push((0..arity).collect());
        }
    }
    Subpopulation::new(schema, sets)
}

/// Covariate profile and arm of one base unit; outcomes are drawn later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseRow {
    pub profile: Vec<u16>,
    pub treated: bool,
}

/// Materializes the base rows once per dataset, so that an injected
/// dataset and its regenerated null copies share covariate profiles and
/// treatment labels exactly.
pub fn realize_base(base: &SimBase, seed: u64) -> Vec<BaseRow> {
    match base {
        SimBase::Synthetic { n, schema } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..*n)
                .map(|_| BaseRow {
                    profile: (0..schema.d())
                        .map(|j| rng.gen_range(0..schema.arity(j)) as u16)
                        .collect(),
                    treated: rng.gen_bool(0.5),
                })
                .collect()
        }
        SimBase::FromRecords { records, .. } => records
            .iter()
            .map(|r| BaseRow { profile: r.profile.clone(), treated: r.treated })
            .collect(),
    }
}

fn sample_alternative(spec: &SimSpec, rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    match spec.alternative {
        Alternative::MeanShift => spec.effect_magnitude + z,
        Alternative::SymmetricMixture => {
            if rng.gen_bool(0.5) {
                spec.effect_magnitude + z
            } else {
                -spec.effect_magnitude + z
            }
        }
    }
}

/// Builds one injected dataset over the given base rows: covariates and
/// treatment labels are kept exactly; treated records inside `affected`
/// draw outcomes from the alternative, everything else from the standard
/// normal null.
pub fn inject(
    spec: &SimSpec,
    base: &[BaseRow],
    affected: &Subpopulation,
    seed: u64,
) -> Result<Vec<Record>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(base
        .iter()
        .map(|row| {
            let outcome = if row.treated && affected.contains(&row.profile) {
                sample_alternative(spec, &mut rng)
            } else {
                StandardNormal.sample(&mut rng)
            };
            Record { outcome, treated: row.treated, profile: row.profile.clone() }
        })
        .collect())
}

/// A no-effect copy of the dataset: same base rows, every outcome drawn
/// from the null distribution.
pub fn regenerate_null(base: &[BaseRow], seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    base.iter()
        .map(|row| Record {
            outcome: StandardNormal.sample(&mut rng),
            treated: row.treated,
            profile: row.profile.clone(),
        })
        .collect()
}

/// The test statistic ranked against null copies in the power protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerStatistic {
    /// The scan's best subpopulation score.
    ScanScore,
    /// Absolute difference of arm mean outcomes over the whole dataset; a
    /// baseline blind to mean-preserving distributional change.
    MeanDifference,
}

fn evaluate_statistic(
    statistic: PowerStatistic,
    records: &[Record],
    schema: &CovariateSchema,
    table_cfg: TableConfig,
    scan_cfg: &ScanConfig,
) -> f64 {
    match statistic {
        PowerStatistic::ScanScore => match build_cell_table(records, schema, table_cfg) {
            Ok(table) => match tess_scan(&table, scan_cfg) {
                Ok(result) => result.score,
                Err(_) => 0.0,
            },
            Err(_) => 0.0,
        },
        PowerStatistic::MeanDifference => {
            let mut t = (0usize, 0.0);
            let mut c = (0usize, 0.0);
            for r in records {
                if r.treated {
                    t = (t.0 + 1, t.1 + r.outcome);
                } else {
                    c = (c.0 + 1, c.1 + r.outcome);
                }
            }
            if t.0 == 0 || c.0 == 0 {
                0.0
            } else {
                (t.1 / t.0 as f64 - c.1 / c.0 as f64).abs()
            }
        }
    }
}

/// Outcome of one power-protocol replicate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub observed: f64,
    pub p_value: f64,
}

/// Detection power estimate with its per-replicate evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerReport {
    pub replicates: Vec<ReplicateOutcome>,
    /// Fraction of replicates with `p <= gamma`.
    pub power: f64,
    /// 95% Wilson interval for the power.
    pub ci: (f64, f64),
    pub gamma: f64,
}

impl PowerReport {
    pub fn p_values(&self) -> Vec<f64> {
        self.replicates.iter().map(|r| r.p_value).collect()
    }
}

fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) + z * z / (4.0 * n)) / n).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Runs the full power protocol: per replicate, plant a fresh random
/// subpopulation, inject the effect, and rank the observed statistic
/// against `null_copies` regenerated no-effect datasets; power is the
/// rejection fraction at `spec.gamma`.
///
/// Per-replicate seeds derive from `spec.seed` by counter, so parallel and
/// serial runs agree.
pub fn detection_power_experiment(
    spec: &SimSpec,
    scan_cfg: &ScanConfig,
    table_cfg: TableConfig,
    statistic: PowerStatistic,
) -> Result<PowerReport> {
    spec.validate()?;
    scan_cfg.validate()?;
    if spec.replicates == 0 {
        return Err(Error::InvalidParameter("need at least 1 replicate".into()));
    }
    if spec.null_copies < 19 {
        return Err(Error::InvalidParameter(format!(
            "need at least 19 null copies, got {}",
            spec.null_copies
        )));
    }

    let schema = spec.base.schema().clone();
    let replicates: Vec<ReplicateOutcome> = (0..spec.replicates)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = mix_seed(spec.seed, rep as u64);
            let affected = generate_affected_subpopulation(
                &schema,
                spec.num_covs,
                spec.value_prob,
                mix_seed(rep_seed, 0),
            )
            .expect("spec was validated");
            let base = realize_base(&spec.base, mix_seed(rep_seed, 1));
            let injected =
                inject(spec, &base, &affected, mix_seed(rep_seed, 2)).expect("spec was validated");
            let observed =
                evaluate_statistic(statistic, &injected, &schema, table_cfg, scan_cfg);
            let exceed = (0..spec.null_copies)
                .into_par_iter()
                .filter(|&copy| {
                    let null = regenerate_null(&base, mix_seed(rep_seed, 3 + copy as u64));
                    evaluate_statistic(statistic, &null, &schema, table_cfg, scan_cfg)
                        >= observed
                })
                .count();
            let p_value = (1 + exceed) as f64 / (spec.null_copies + 1) as f64;
            ReplicateOutcome { replicate: rep, observed, p_value }
        })
        .collect();

    let rejections = replicates.iter().filter(|r| r.p_value <= spec.gamma).count();
    let power = rejections as f64 / spec.replicates as f64;
    let ci = wilson_interval(rejections, spec.replicates);
    Ok(PowerReport { replicates, power, ci, gamma: spec.gamma })
}

/// Jaccard overlap between detected and true subpopulations, counted over
/// treatment-group records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JaccardAccuracy {
    pub intersection: usize,
    pub union: usize,
    /// `intersection / union`; 1 by convention when both sets are empty.
    pub value: f64,
    /// True when neither subpopulation matched any treatment record.
    pub vacuous: bool,
}

/// Detection accuracy of `detected` against `truth` over the treatment
/// records of `records`.
pub fn accuracy(
    detected: &Subpopulation,
    truth: &Subpopulation,
    records: &[Record],
) -> JaccardAccuracy {
    let mut intersection = 0;
    let mut union = 0;
    for r in records.iter().filter(|r| r.treated) {
        let in_detected = detected.contains(&r.profile);
        let in_truth = truth.contains(&r.profile);
        if in_detected && in_truth {
            intersection += 1;
        }
        if in_detected || in_truth {
            union += 1;
        }
    }
    if union == 0 {
        JaccardAccuracy { intersection, union, value: 1.0, vacuous: true }
    } else {
        JaccardAccuracy {
            intersection,
            union,
            value: intersection as f64 / union as f64,
            vacuous: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ScoreKind;
    use approx::assert_relative_eq;

    fn spec_with(
        delta: f64,
        alternative: Alternative,
        base_n: usize,
        arities: &[usize],
        seed: u64,
    ) -> SimSpec {
        SimSpec {
            effect_magnitude: delta,
            num_covs: 2,
            value_prob: 0.5,
            alternative,
            base: SimBase::Synthetic { n: base_n, schema: CovariateSchema::synthetic(arities) },
            replicates: 20,
            null_copies: 39,
            gamma: 0.05,
            seed,
        }
    }

    #[test]
    fn zero_num_covs_gives_full_population() {
        let schema = CovariateSchema::synthetic(&[3, 4, 2]);
        let sub = generate_affected_subpopulation(&schema, 0, 0.5, 7).unwrap();
        assert!(sub.is_full(&schema));
    }

    #[test]
    fn value_prob_one_keeps_every_value() {
        let schema = CovariateSchema::synthetic(&[3, 4, 2]);
        for seed in 0..20 {
            let sub = generate_affected_subpopulation(&schema, 3, 1.0, seed).unwrap();
            assert!(sub.is_full(&schema));
        }
    }

    #[test]
    fn reference_configuration_restricts_selected_covariates() {
        let schema = CovariateSchema::synthetic(&[6; 10]);
        let mut fully_restricted = 0;
        for seed in 0..100 {
            let sub = generate_affected_subpopulation(&schema, 5, 0.5, seed).unwrap();
            let non_full = (0..10)
                .filter(|&j| sub.value_indices(j).len() < schema.arity(j))
                .count();
            assert!(non_full <= 5, "more modes restricted than selected");
            if non_full == 5 {
                fully_restricted += 1;
            }
        }
        // A selected covariate keeps all 6 values only with prob 2^-6.
        assert!(fully_restricted >= 50, "only {fully_restricted}/100 draws restricted all 5");
    }

    #[test]
    fn injection_preserves_base_structure() {
        let spec = spec_with(2.0, Alternative::MeanShift, 500, &[3, 3], 11);
        let schema = spec.base.schema().clone();
        let affected = generate_affected_subpopulation(&schema, 2, 0.5, 1).unwrap();
        let base = realize_base(&spec.base, 4);
        let a = inject(&spec, &base, &affected, 5).unwrap();
        let b = inject(&spec, &base, &affected, 6).unwrap();
        let null = regenerate_null(&base, 7);
        for ((x, y), z) in a.iter().zip(&b).zip(&null) {
            assert_eq!(x.profile, y.profile);
            assert_eq!(x.treated, y.treated);
            assert_eq!(x.profile, z.profile);
            assert_eq!(x.treated, z.treated);
        }
    }

    #[test]
    fn zero_effect_injection_is_null() {
        let spec = spec_with(0.0, Alternative::MeanShift, 4000, &[2, 2], 3);
        let schema = spec.base.schema().clone();
        let affected = generate_affected_subpopulation(&schema, 2, 0.5, 2).unwrap();
        let base = realize_base(&spec.base, 8);
        let records = inject(&spec, &base, &affected, 9).unwrap();
        let aff: Vec<f64> = records
            .iter()
            .filter(|r| r.treated && affected.contains(&r.profile))
            .map(|r| r.outcome)
            .collect();
        let rest: Vec<f64> = records
            .iter()
            .filter(|r| !(r.treated && affected.contains(&r.profile)))
            .map(|r| r.outcome)
            .collect();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean(&aff).abs() < 0.2, "affected mean {}", mean(&aff));
        assert!(mean(&rest).abs() < 0.1, "rest mean {}", mean(&rest));
    }

    #[test]
    fn mean_shift_moments() {
        let mut spec = spec_with(1.5, Alternative::MeanShift, 20_000, &[2], 17);
        spec.num_covs = 1;
        let schema = spec.base.schema().clone();
        let affected = Subpopulation::new(&schema, vec![vec![0]]).unwrap();
        let base = realize_base(&spec.base, 21);
        let records = inject(&spec, &base, &affected, 23).unwrap();
        let aff: Vec<f64> = records
            .iter()
            .filter(|r| r.treated && affected.contains(&r.profile))
            .map(|r| r.outcome)
            .collect();
        let mean = aff.iter().sum::<f64>() / aff.len() as f64;
        assert!((mean - 1.5).abs() < 0.1, "affected mean {mean}");
    }

    #[test]
    fn mixture_moments() {
        let mut spec = spec_with(3.0, Alternative::SymmetricMixture, 40_000, &[2], 19);
        spec.num_covs = 1;
        let schema = spec.base.schema().clone();
        let affected = Subpopulation::new(&schema, vec![vec![0]]).unwrap();
        let base = realize_base(&spec.base, 27);
        let records = inject(&spec, &base, &affected, 29).unwrap();
        let aff: Vec<f64> = records
            .iter()
            .filter(|r| r.treated && affected.contains(&r.profile))
            .map(|r| r.outcome)
            .collect();
        let n = aff.len() as f64;
        let mean = aff.iter().sum::<f64>() / n;
        let var = aff.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.15, "mixture mean {mean}");
        assert!((var - 10.0).abs() < 0.6, "mixture variance {var}");
    }

    fn quick_scan() -> ScanConfig {
        ScanConfig {
            score: ScoreKind::Bj,
            alpha_min: 0.01,
            alpha_max: 0.2,
            restarts: 5,
            seed: 41,
            ..ScanConfig::default()
        }
    }

    /// Desk-scale power behavior: saturating at a strong effect, calibrated
    /// at zero effect, monotone in between. The acceptance suite runs the
    /// full-size protocol.
    #[test]
    fn power_monotone_in_effect_size() {
        let mut powers = Vec::new();
        for (i, delta) in [0.0, 1.5, 3.0].into_iter().enumerate() {
            let mut spec = spec_with(delta, Alternative::MeanShift, 600, &[3, 3, 2], 100 + i as u64);
            spec.num_covs = 2;
            let report = detection_power_experiment(
                &spec,
                &quick_scan(),
                TableConfig::default(),
                PowerStatistic::ScanScore,
            )
            .unwrap();
            powers.push(report);
        }
        assert!(
            powers[0].power <= powers[0].gamma + 0.17,
            "null power {} not calibrated",
            powers[0].power
        );
        assert!(powers[2].power >= 0.8, "strong-effect power {}", powers[2].power);
        // CI separation between the null and the strong effect.
        assert!(
            powers[0].ci.1 < powers[2].ci.0,
            "null CI {:?} overlaps strong CI {:?}",
            powers[0].ci,
            powers[2].ci
        );
        assert!(powers[1].power >= powers[0].power - 0.1);
        assert!(powers[2].power >= powers[1].power - 0.1);
    }

    #[test]
    fn accuracy_identical_and_disjoint() {
        let schema = CovariateSchema::synthetic(&[2, 2]);
        let records: Vec<Record> = (0..2u16)
            .flat_map(|a| (0..2u16).map(move |b| Record::new(0.0, true, vec![a, b])))
            .collect();
        let left = Subpopulation::new(&schema, vec![vec![0], vec![0, 1]]).unwrap();
        let right = Subpopulation::new(&schema, vec![vec![1], vec![0, 1]]).unwrap();
        assert_relative_eq!(accuracy(&left, &left, &records).value, 1.0);
        assert_relative_eq!(accuracy(&left, &right, &records).value, 0.0);
    }

    #[test]
    fn accuracy_partial_overlap() {
        // 8 treated records; detected covers rows {0,1}, truth covers
        // rows {1,2}: overlap 2 records, union 8 after the grid layout.
        let schema = CovariateSchema::synthetic(&[4, 2]);
        let records: Vec<Record> = (0..4u16)
            .flat_map(|a| (0..2u16).map(move |b| Record::new(0.0, true, vec![a, b])))
            .collect();
        let detected = Subpopulation::new(&schema, vec![vec![0, 1], vec![0, 1]]).unwrap();
        let truth = Subpopulation::new(&schema, vec![vec![1, 2], vec![0, 1]]).unwrap();
        let acc = accuracy(&detected, &truth, &records);
        assert_eq!(acc.intersection, 2);
        assert_eq!(acc.union, 6);
        assert_relative_eq!(acc.value, 2.0 / 6.0);
    }

    #[test]
    fn accuracy_vacuous_when_no_treated_matches() {
        let schema = CovariateSchema::synthetic(&[2]);
        let records = vec![Record::new(0.0, false, vec![0]), Record::new(0.0, false, vec![1])];
        let sub = Subpopulation::new(&schema, vec![vec![0]]).unwrap();
        let acc = accuracy(&sub, &sub, &records);
        assert!(acc.vacuous);
        assert_relative_eq!(acc.value, 1.0);
    }

    /// With a strong planted signal the scan's accuracy towers over a
    /// random rectangular guess.
    #[test]
    fn scan_accuracy_beats_random_guess() {
        let spec = SimSpec {
            effect_magnitude: 3.0,
            num_covs: 2,
            value_prob: 0.5,
            alternative: Alternative::MeanShift,
            base: SimBase::Synthetic { n: 1500, schema: CovariateSchema::synthetic(&[3, 3, 2, 2]) },
            replicates: 10,
            null_copies: 19,
            gamma: 0.05,
            seed: 55,
        };
        let schema = spec.base.schema().clone();
        let mut scan_acc = Vec::new();
        let mut guess_acc = Vec::new();
        for rep in 0..10u64 {
            let truth =
                generate_affected_subpopulation(&schema, 2, 0.5, mix_seed(1000, rep)).unwrap();
            let base = realize_base(&spec.base, mix_seed(1500, rep));
            let records = inject(&spec, &base, &truth, mix_seed(2000, rep)).unwrap();
            let table = build_cell_table(&records, &schema, TableConfig::default()).unwrap();
            let detected = tess_scan(&table, &quick_scan()).unwrap().best;
            scan_acc.push(accuracy(&detected, &truth, &records).value);
            let guess =
                generate_affected_subpopulation(&schema, 2, 0.5, mix_seed(3000, rep)).unwrap();
            guess_acc.push(accuracy(&guess, &truth, &records).value);
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let (s, g) = (mean(&scan_acc), mean(&guess_acc));
        assert!(s >= 3.0 * g, "scan accuracy {s} not well above random guess {g}");
    }
}
