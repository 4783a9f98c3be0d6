//! Sparse covariate-profile tensor over experiment records, plus
//! rectangular subpopulations and their sufficient statistics.
//!
//! Only profiles that actually occur are stored; the dense cross product of
//! value sets is never materialized (ten covariates of modest arity already
//! make the dense tensor infeasible).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reference::{
    p_value_range, significance_mass, PValueRange, ReferenceDistribution, Sidedness,
};

/// One full combination of covariate value indices; a cell key.
pub type Profile = Vec<u16>;

/// Named covariates and their value labels, fixing mode order and arities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSchema {
    covariates: Vec<(String, Vec<String>)>,
}

impl CovariateSchema {
    pub fn new(covariates: Vec<(String, Vec<String>)>) -> Result<Self> {
        if covariates.is_empty() {
            return Err(Error::InvalidSchema("need at least one covariate".into()));
        }
        for (name, values) in &covariates {
            if values.is_empty() {
                return Err(Error::InvalidSchema(format!("covariate {name} has no values")));
            }
            let mut sorted = values.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != values.len() {
                return Err(Error::InvalidSchema(format!(
                    "covariate {name} has duplicate value labels"
                )));
            }
        }
        Ok(Self { covariates })
    }

    /// Schema with `arities[j]` unnamed values per covariate, for synthetic
    /// and test data.
    pub fn synthetic(arities: &[usize]) -> Self {
        let covariates = arities
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                (format!("x{j}"), (0..k).map(|v| format!("v{v}")).collect())
            })
            .collect();
        Self::new(covariates).expect("synthetic schema is valid")
    }

    /// Number of covariates (tensor modes).
    pub fn d(&self) -> usize {
        self.covariates.len()
    }

    /// Number of values of covariate `j`.
    pub fn arity(&self, j: usize) -> usize {
        self.covariates[j].1.len()
    }

    pub fn name(&self, j: usize) -> &str {
        &self.covariates[j].0
    }

    pub fn value_label(&self, j: usize, v: usize) -> &str {
        &self.covariates[j].1[v]
    }

    pub fn value_index(&self, j: usize, label: &str) -> Option<usize> {
        self.covariates[j].1.iter().position(|l| l == label)
    }

    fn check_profile(&self, profile: &[u16], record: usize) -> Result<()> {
        if profile.len() != self.d() {
            return Err(Error::ProfileMismatch {
                record,
                reason: format!("profile has {} entries, schema has {}", profile.len(), self.d()),
            });
        }
        for (j, &v) in profile.iter().enumerate() {
            if v as usize >= self.arity(j) {
                return Err(Error::ProfileMismatch {
                    record,
                    reason: format!(
                        "value index {v} out of range for covariate {} (arity {})",
                        self.name(j),
                        self.arity(j)
                    ),
                });
            }
        }
        Ok(())
    }
}

/// One experimental unit: observed outcome, arm indicator, covariate profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub outcome: f64,
    pub treated: bool,
    pub profile: Profile,
}

impl Record {
    pub fn new(outcome: f64, treated: bool, profile: Profile) -> Self {
        Self { outcome, treated, profile }
    }
}

/// Rectangular subpopulation: one non-empty subset of value indices per
/// covariate mode. A profile belongs iff every coordinate is included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subpopulation {
    included: Vec<Vec<bool>>,
}

impl Subpopulation {
    pub fn new(schema: &CovariateSchema, value_sets: Vec<Vec<usize>>) -> Result<Self> {
        if value_sets.len() != schema.d() {
            return Err(Error::InvalidSubpopulation(format!(
                "{} value sets for {} covariates",
                value_sets.len(),
                schema.d()
            )));
        }
        let mut included = Vec::with_capacity(schema.d());
        for (j, set) in value_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidSubpopulation(format!(
                    "covariate {} has an empty value subset",
                    schema.name(j)
                )));
            }
            let mut flags = vec![false; schema.arity(j)];
            for &v in set {
                if v >= schema.arity(j) {
                    return Err(Error::InvalidSubpopulation(format!(
                        "value index {v} out of range for covariate {}",
                        schema.name(j)
                    )));
                }
                flags[v] = true;
            }
            included.push(flags);
        }
        Ok(Self { included })
    }

    /// The full population: every value of every covariate.
    pub fn full(schema: &CovariateSchema) -> Self {
        Self {
            included: (0..schema.d()).map(|j| vec![true; schema.arity(j)]).collect(),
        }
    }

    pub(crate) fn from_flags(included: Vec<Vec<bool>>) -> Self {
        debug_assert!(included.iter().all(|f| f.iter().any(|&b| b)));
        Self { included }
    }

    pub fn d(&self) -> usize {
        self.included.len()
    }

    pub fn contains(&self, profile: &[u16]) -> bool {
        profile
            .iter()
            .enumerate()
            .all(|(j, &v)| self.included[j][v as usize])
    }

    /// Included value indices of mode `j`, ascending.
    pub fn value_indices(&self, j: usize) -> Vec<usize> {
        self.included[j]
            .iter()
            .enumerate()
            .filter_map(|(v, &b)| b.then_some(v))
            .collect()
    }

    pub fn includes_value(&self, j: usize, v: usize) -> bool {
        self.included[j][v]
    }

    /// Replaces mode `j`'s value set with `flags` (must be non-empty).
    pub(crate) fn set_mode(&mut self, j: usize, flags: Vec<bool>) {
        debug_assert!(flags.iter().any(|&b| b));
        self.included[j] = flags;
    }

    pub(crate) fn mode_flags(&self, j: usize) -> &[bool] {
        &self.included[j]
    }

    pub fn is_full(&self, schema: &CovariateSchema) -> bool {
        self.included
            .iter()
            .enumerate()
            .all(|(j, f)| f.iter().all(|&b| b) && f.len() == schema.arity(j))
    }

    fn validate(&self, schema: &CovariateSchema) -> Result<()> {
        if self.d() != schema.d()
            || self
                .included
                .iter()
                .enumerate()
                .any(|(j, f)| f.len() != schema.arity(j))
        {
            return Err(Error::InvalidSubpopulation(
                "subpopulation shape does not match schema".into(),
            ));
        }
        if self.included.iter().any(|f| !f.iter().any(|&b| b)) {
            return Err(Error::InvalidSubpopulation("empty value subset".into()));
        }
        Ok(())
    }
}

/// A treated unit living in one cell: its outcome and, when the cell has a
/// reference distribution (or orphans are kept), its p-value range.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatedUnit {
    pub outcome: f64,
    pub range: Option<PValueRange>,
}

/// All records sharing one covariate profile.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cell {
    controls: Vec<f64>,
    treated: Vec<TreatedUnit>,
}

impl Cell {
    pub fn control_outcomes(&self) -> &[f64] {
        &self.controls
    }

    pub fn n_control(&self) -> usize {
        self.controls.len()
    }

    pub fn treated_units(&self) -> &[TreatedUnit] {
        &self.treated
    }

    /// P-value ranges of the scannable treated units in this cell.
    pub fn ranges(&self) -> impl Iterator<Item = PValueRange> + '_ {
        self.treated.iter().filter_map(|u| u.range)
    }

    /// Number of scannable treated units (those carrying a range).
    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|u| u.range.is_some()).count()
    }

    /// Total significance mass of this cell's ranges at level `alpha`.
    pub fn mass_at(&self, alpha: f64) -> f64 {
        self.ranges().map(|r| significance_mass(&r, alpha)).sum()
    }
}

/// How the cell table derives p-values and treats orphan treated units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TableConfig {
    pub sidedness: Sidedness,
    /// Keep treated units whose profile has no controls, assigning the
    /// uninformative full range `(0, 1]`. Off by default: such units only
    /// dilute subset counts.
    pub include_orphan_treated: bool,
}

/// Sparse tensor mapping covariate profiles to their records and p-value
/// ranges. Immutable after construction; shared freely across threads.
#[derive(Debug, Clone)]
pub struct CellTable {
    schema: CovariateSchema,
    cells: BTreeMap<Profile, Cell>,
    excluded_treated: usize,
    scannable_cells: usize,
}

impl CellTable {
    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    /// Cells in deterministic (lexicographic profile) order.
    pub fn cells(&self) -> impl Iterator<Item = (&Profile, &Cell)> {
        self.cells.iter()
    }

    pub fn cell(&self, profile: &Profile) -> Option<&Cell> {
        self.cells.get(profile)
    }

    /// Number of profiles holding at least one scannable treated unit.
    pub fn num_treatment_cells(&self) -> usize {
        self.scannable_cells
    }

    /// Treated units dropped because their profile had no controls.
    pub fn excluded_treated(&self) -> usize {
        self.excluded_treated
    }

    /// Total number of scannable treated units.
    pub fn n_treated_total(&self) -> usize {
        self.cells.values().map(Cell::n_treated).sum()
    }

    /// Smallest control count among cells holding scannable treated units.
    pub fn min_control_count(&self) -> Option<usize> {
        self.cells
            .values()
            .filter(|c| c.n_treated() > 0)
            .map(Cell::n_control)
            .min()
    }

    /// All p-value ranges in the table, cell order.
    pub fn all_ranges(&self) -> impl Iterator<Item = PValueRange> + '_ {
        self.cells.values().flat_map(Cell::ranges)
    }

    /// Ranges of the cells belonging to `sub`, cell order.
    pub fn ranges_in<'a>(
        &'a self,
        sub: &'a Subpopulation,
    ) -> impl Iterator<Item = PValueRange> + 'a {
        self.cells
            .iter()
            .filter(move |(p, _)| sub.contains(p))
            .flat_map(|(_, c)| c.ranges())
    }

    /// Builds a table directly from per-profile p-value ranges, bypassing
    /// reference estimation. Intended for validation instances where cell
    /// compositions must be controlled exactly; such cells carry no control
    /// outcomes.
    pub fn from_p_value_ranges(
        schema: CovariateSchema,
        entries: Vec<(Profile, Vec<PValueRange>)>,
    ) -> Result<Self> {
        let mut cells: BTreeMap<Profile, Cell> = BTreeMap::new();
        for (idx, (profile, ranges)) in entries.into_iter().enumerate() {
            schema.check_profile(&profile, idx)?;
            let cell = cells.entry(profile).or_default();
            cell.treated.extend(
                ranges.into_iter().map(|r| TreatedUnit { outcome: f64::NAN, range: Some(r) }),
            );
        }
        let scannable_cells = cells.values().filter(|c| c.n_treated() > 0).count();
        Ok(Self { schema, cells, excluded_treated: 0, scannable_cells })
    }
}

/// Groups records into profile cells and assigns each treated unit its
/// empirical p-value range from the controls sharing its profile.
///
/// Treated units in profiles with no controls are excluded and tallied
/// (or kept with the full range when the config says so). An all-control
/// input builds a table with zero treatment cells; scanning refuses it
/// later.
pub fn build_cell_table(
    records: &[Record],
    schema: &CovariateSchema,
    config: TableConfig,
) -> Result<CellTable> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut cells: BTreeMap<Profile, Cell> = BTreeMap::new();
    for (idx, record) in records.iter().enumerate() {
        schema.check_profile(&record.profile, idx)?;
        let cell = cells.entry(record.profile.clone()).or_default();
        if record.treated {
            cell.treated.push(TreatedUnit { outcome: record.outcome, range: None });
        } else {
            cell.controls.push(record.outcome);
        }
    }

    let mut excluded_treated = 0;
    for cell in cells.values_mut() {
        cell.controls.sort_unstable_by(f64::total_cmp);
        match ReferenceDistribution::new(cell.controls.clone()) {
            Some(reference) => {
                for unit in &mut cell.treated {
                    unit.range = Some(p_value_range(&reference, unit.outcome, config.sidedness));
                }
            }
            None => {
                if config.include_orphan_treated {
                    for unit in &mut cell.treated {
                        unit.range = Some(PValueRange::FULL);
                    }
                } else {
                    excluded_treated += cell.treated.len();
                }
            }
        }
    }

    let scannable_cells = cells.values().filter(|c| c.n_treated() > 0).count();
    Ok(CellTable { schema: schema.clone(), cells, excluded_treated, scannable_cells })
}

/// Sufficient statistics of a subpopulation: total significance mass at the
/// chosen level, and the number of p-value ranges it contains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub n_alpha: f64,
    pub n_total: u64,
}

/// Aggregates counts over exactly the cells whose profile passes the
/// per-mode membership test. A subpopulation matching no treatment cells
/// yields `(0, 0)`.
pub fn subset_counts(sub: &Subpopulation, table: &CellTable, alpha: f64) -> Result<SubsetCounts> {
    sub.validate(table.schema())?;
    let mut n_alpha = 0.0;
    let mut n_total = 0u64;
    for (profile, cell) in table.cells() {
        if sub.contains(profile) {
            n_alpha += cell.mass_at(alpha);
            n_total += cell.n_treated() as u64;
        }
    }
    Ok(SubsetCounts { n_alpha, n_total })
}
