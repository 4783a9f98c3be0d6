//! Maximization of the scan statistic over rectangular subpopulations:
//! linear-time per-mode subset optimization inside cyclic ordinal ascent
//! with random restarts.
//!
//! For a fixed significance level and fixed value subsets of the other
//! modes, the score is a function of two additive sufficient statistics, so
//! only prefixes of the priority-sorted value list can be optimal: one mode
//! is maximized exactly over all `2^k - 1` value subsets by evaluating `k`
//! prefixes. Cycling through modes until nothing changes yields a
//! conditional optimum; restarts from random subsets recover near-global
//! optima with high probability.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CellTable, Profile, Subpopulation};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::reference::{candidate_alphas, significance_mass};
use crate::score::{check_window, max_over_alpha, ScoreKind, ScoredAlpha};

/// Convergence threshold on the per-cycle score improvement.
const CONVERGENCE_EPS: f64 = 1e-12;

/// Scan settings: statistic, significance window, restart schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub score: ScoreKind,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Number of random restarts.
    pub restarts: usize,
    /// Safety cap on ascent cycles within one restart.
    pub max_cycles: usize,
    pub seed: u64,
    /// Probability that a value enters the initial random subset.
    pub inclusion_prob: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            score: ScoreKind::default(),
            alpha_min: 0.001,
            alpha_max: 0.1,
            restarts: 50,
            max_cycles: 100,
            seed: 0,
            inclusion_prob: 0.5,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.alpha_min, self.alpha_max)?;
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        if self.max_cycles == 0 {
            return Err(Error::InvalidParameter("max_cycles must be at least 1".into()));
        }
        if !(self.inclusion_prob > 0.0 && self.inclusion_prob < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "inclusion_prob must lie in (0,1), got {}",
                self.inclusion_prob
            )));
        }
        Ok(())
    }
}

/// LTSS priority of a cell or value: significance mass per p-value range.
pub fn priority(cell_n_alpha: f64, cell_n: f64) -> f64 {
    debug_assert!(cell_n > 0.0, "priority is undefined without treatment mass");
    cell_n_alpha / cell_n
}

/// Outcome of a single restart.
#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub subpopulation: Subpopulation,
    /// Final score, recomputed from scratch on the converged subpopulation.
    pub scored: ScoredAlpha,
    /// Ascent cycles that changed the subpopulation (the confirming final
    /// cycle is not counted).
    pub cycles: usize,
    pub hit_max_cycles: bool,
    /// Scores after the initial evaluation and after each mode
    /// optimization; nondecreasing.
    pub score_trace: Vec<f64>,
}

/// Best subpopulation over all restarts, with per-restart diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanResult {
    pub best: Subpopulation,
    pub score: f64,
    pub alpha: f64,
    pub restart_scores: Vec<f64>,
    pub cycles_per_restart: Vec<usize>,
    /// Restarts that exhausted `max_cycles` before converging.
    pub hit_max_cycles: usize,
    #[serde(skip, default)]
    pub wall_time: Duration,
}

/// Immutable per-scan view: the global candidate-alpha grid and, for every
/// cell holding p-value ranges, its significance mass at each grid point.
pub(crate) struct ScanContext {
    grid: Vec<f64>,
    cells: Vec<ContextCell>,
    arities: Vec<usize>,
    alpha_min: f64,
}

struct ContextCell {
    profile: Profile,
    count: f64,
    masses: Vec<f64>,
}

impl ScanContext {
    pub(crate) fn new(table: &CellTable, alpha_min: f64, alpha_max: f64) -> Self {
        let grid = candidate_alphas(table.all_ranges(), alpha_min, alpha_max);
        let cells = table
            .cells()
            .filter(|(_, c)| c.n_treated() > 0)
            .map(|(profile, cell)| {
                let ranges: Vec<_> = cell.ranges().collect();
                let masses = grid
                    .iter()
                    .map(|&a| ranges.iter().map(|r| significance_mass(r, a)).sum())
                    .collect();
                ContextCell { profile: profile.clone(), count: ranges.len() as f64, masses }
            })
            .collect();
        let schema = table.schema();
        let arities = (0..schema.d()).map(|j| schema.arity(j)).collect();
        Self { grid, cells, arities, alpha_min }
    }

    /// Per-value counts and per-grid-point masses for mode `mode`, over the
    /// cells consistent with `sub` on every other mode. Cell contributions
    /// accumulate in cell order, making per-value sums reproducible.
    pub(crate) fn mode_aggregates(&self, mode: usize, sub: &Subpopulation) -> ModeAggregates {
        let arity = self.arities[mode];
        let mut counts = vec![0.0; arity];
        let mut masses = vec![vec![0.0; self.grid.len()]; arity];
        for cell in &self.cells {
            let consistent = cell
                .profile
                .iter()
                .enumerate()
                .all(|(j, &v)| j == mode || sub.includes_value(j, v as usize));
            if !consistent {
                continue;
            }
            let v = cell.profile[mode] as usize;
            counts[v] += cell.count;
            for (slot, &m) in masses[v].iter_mut().zip(&cell.masses) {
                *slot += m;
            }
        }
        ModeAggregates { counts, masses }
    }

    /// Score of a whole subpopulation, maximized over the grid; ties toward
    /// smaller alpha.
    fn eval_subpopulation(&self, sub: &Subpopulation, kind: ScoreKind) -> ScoredAlpha {
        let mut best = ScoredAlpha::zero(self.alpha_min);
        let mut best_set = false;
        for (ai, &alpha) in self.grid.iter().enumerate() {
            let mut n_alpha = 0.0;
            let mut n_total = 0.0;
            for cell in &self.cells {
                if sub.contains(&cell.profile) {
                    n_alpha += cell.masses[ai];
                    n_total += cell.count;
                }
            }
            let score = kind.evaluate(n_alpha, n_total, alpha);
            if !best_set || score > best.score {
                best =
                    ScoredAlpha { alpha, score, mu_nate: kind.divergence(n_alpha, n_total, alpha) };
                best_set = true;
            }
        }
        best
    }

    /// Highest-marginal-priority value of `mode` (mass ratio at the top of
    /// the window, ties to the lower index), used when the fixed modes
    /// strand this mode with no treatment mass.
    fn marginal_fallback(&self, mode: usize) -> usize {
        let arity = self.arities[mode];
        let top = self.grid.len().saturating_sub(1);
        let mut counts = vec![0.0; arity];
        let mut masses = vec![0.0; arity];
        for cell in &self.cells {
            let v = cell.profile[mode] as usize;
            counts[v] += cell.count;
            masses[v] += cell.masses.get(top).copied().unwrap_or(0.0);
        }
        (0..arity)
            .filter(|&v| counts[v] > 0.0)
            .max_by(|&a, &b| {
                priority(masses[a], counts[a])
                    .total_cmp(&priority(masses[b], counts[b]))
                    .then(b.cmp(&a))
            })
            .unwrap_or(0)
    }

    pub(crate) fn grid(&self) -> &[f64] {
        &self.grid
    }
}

pub(crate) struct ModeAggregates {
    pub(crate) counts: Vec<f64>,
    /// `masses[v][ai]`: significance mass of value `v` at grid point `ai`.
    pub(crate) masses: Vec<Vec<f64>>,
}

impl ModeAggregates {
    /// Canonical score of a value subset at grid point `ai`: fold included
    /// values in ascending index order. Both the prefix search and the
    /// exhaustive oracle score subsets through this one path, so their
    /// results are comparable at zero tolerance.
    pub(crate) fn score_subset(
        &self,
        included: impl Iterator<Item = usize>,
        ai: usize,
        alpha: f64,
        kind: ScoreKind,
    ) -> (f64, f64, f64) {
        let mut n_alpha = 0.0;
        let mut n_total = 0.0;
        for v in included {
            n_alpha += self.masses[v][ai];
            n_total += self.counts[v];
        }
        (kind.evaluate(n_alpha, n_total, alpha), n_alpha, n_total)
    }
}

fn optimize_mode_in(
    ctx: &ScanContext,
    mode: usize,
    sub: &Subpopulation,
    kind: ScoreKind,
) -> (Vec<bool>, ScoredAlpha) {
    let arity = ctx.arities[mode];
    let agg = ctx.mode_aggregates(mode, sub);
    let live: Vec<usize> = (0..arity).filter(|&v| agg.counts[v] > 0.0).collect();
    if live.is_empty() {
        let mut flags = vec![false; arity];
        flags[ctx.marginal_fallback(mode)] = true;
        return (flags, ScoredAlpha::zero(ctx.alpha_min));
    }

    let mut best_score = f64::NEG_INFINITY;
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut order = live.clone();
    let mut chosen: Vec<usize> = Vec::with_capacity(arity);
    for (ai, &alpha) in ctx.grid.iter().enumerate() {
        order.sort_unstable_by(|&a, &b| {
            priority(agg.masses[b][ai], agg.counts[b])
                .total_cmp(&priority(agg.masses[a][ai], agg.counts[a]))
                .then(a.cmp(&b))
        });
        for t in 1..=order.len() {
            chosen.clear();
            chosen.extend_from_slice(&order[..t]);
            chosen.sort_unstable();
            let (score, _, _) = agg.score_subset(chosen.iter().copied(), ai, alpha, kind);
            if score > best_score {
                best_score = score;
                best = Some((ai, chosen.clone()));
            }
        }
    }

    let (ai, values) = best.expect("at least one prefix is evaluated");
    let alpha = ctx.grid[ai];
    let (score, n_alpha, n_total) = agg.score_subset(values.iter().copied(), ai, alpha, kind);
    let mut flags = vec![false; arity];
    for v in values {
        flags[v] = true;
    }
    let scored = ScoredAlpha { alpha, score, mu_nate: kind.divergence(n_alpha, n_total, alpha) };
    (flags, scored)
}

/// Maximizes the score over value subsets of one mode, holding the other
/// modes at `sub`'s subsets. Exact over all `2^k - 1` subsets by the
/// linear-time subset scanning property.
///
/// When the fixed modes leave this mode without any treatment mass, the
/// result is a zero-score singleton of the mode's highest marginal-priority
/// value, which lets the ascent recover instead of stalling.
pub fn optimize_mode(
    mode: usize,
    sub: &Subpopulation,
    table: &CellTable,
    cfg: &ScanConfig,
) -> Result<(Vec<usize>, ScoredAlpha)> {
    cfg.validate()?;
    if mode >= table.schema().d() {
        return Err(Error::InvalidParameter(format!("mode {mode} out of range")));
    }
    let ctx = ScanContext::new(table, cfg.alpha_min, cfg.alpha_max);
    let (flags, scored) = optimize_mode_in(&ctx, mode, sub, cfg.score);
    let values = flags.iter().enumerate().filter_map(|(v, &b)| b.then_some(v)).collect();
    Ok((values, scored))
}

fn random_subpopulation(
    ctx: &ScanContext,
    inclusion_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Subpopulation {
    let flags = ctx
        .arities
        .iter()
        .map(|&arity| loop {
            let draw: Vec<bool> = (0..arity).map(|_| rng.gen_bool(inclusion_prob)).collect();
            if draw.iter().any(|&b| b) {
                break draw;
            }
        })
        .collect();
    Subpopulation::from_flags(flags)
}

fn scan_restart_in(
    ctx: &ScanContext,
    table: &CellTable,
    cfg: &ScanConfig,
    restart_seed: u64,
) -> RestartOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed);
    let mut sub = random_subpopulation(ctx, cfg.inclusion_prob, &mut rng);
    let d = ctx.arities.len();

    let mut current = ctx.eval_subpopulation(&sub, cfg.score);
    let mut score_trace = vec![current.score];
    let mut effective_cycles = 0;
    let mut hit_max_cycles = false;

    for cycle in 1..=cfg.max_cycles {
        let cycle_start = current.score;
        let mut changed = false;
        for mode in 0..d {
            let (flags, scored) = optimize_mode_in(ctx, mode, &sub, cfg.score);
            if flags != sub.mode_flags(mode) {
                changed = true;
            }
            sub.set_mode(mode, flags);
            current = scored;
            score_trace.push(scored.score);
        }
        if changed {
            effective_cycles += 1;
        }
        if !changed && current.score - cycle_start < CONVERGENCE_EPS {
            break;
        }
        if cycle == cfg.max_cycles {
            hit_max_cycles = true;
        }
    }

    let scored = max_over_alpha(&sub, table, cfg.score, cfg.alpha_min, cfg.alpha_max)
        .expect("window was validated");
    RestartOutcome {
        subpopulation: sub,
        scored,
        cycles: effective_cycles,
        hit_max_cycles,
        score_trace,
    }
}

/// One ascent from a random initial subpopulation: cycles over modes,
/// re-optimizing each given the others, until a full cycle changes nothing
/// and improves the score by less than 1e-12 (or the cycle cap is hit).
/// The returned score is recomputed from scratch on the final
/// subpopulation.
pub fn scan_restart(
    table: &CellTable,
    cfg: &ScanConfig,
    restart_seed: u64,
) -> Result<RestartOutcome> {
    cfg.validate()?;
    if table.num_treatment_cells() == 0 {
        return Err(Error::NoTreatmentCells);
    }
    let ctx = ScanContext::new(table, cfg.alpha_min, cfg.alpha_max);
    Ok(scan_restart_in(&ctx, table, cfg, restart_seed))
}

/// Full scan: the best subpopulation over `cfg.restarts` independent
/// restarts. Restart seeds derive from `cfg.seed` by counter, restarts run
/// in parallel over the immutable table, and the reduction is by maximum
/// score with ties to the lowest restart index, so results are identical
/// for a fixed seed regardless of thread schedule.
pub fn tess_scan(table: &CellTable, cfg: &ScanConfig) -> Result<ScanResult> {
    cfg.validate()?;
    if table.num_treatment_cells() == 0 {
        return Err(Error::NoTreatmentCells);
    }
    let start = Instant::now();
    let ctx = ScanContext::new(table, cfg.alpha_min, cfg.alpha_max);
    let outcomes: Vec<RestartOutcome> = (0..cfg.restarts)
        .into_par_iter()
        .map(|i| scan_restart_in(&ctx, table, cfg, mix_seed(cfg.seed, i as u64)))
        .collect();

    let mut best_idx = 0;
    for i in 1..outcomes.len() {
        if outcomes[i].scored.score > outcomes[best_idx].scored.score {
            best_idx = i;
        }
    }
    let best = &outcomes[best_idx];
    Ok(ScanResult {
        best: best.subpopulation.clone(),
        score: best.scored.score,
        alpha: best.scored.alpha,
        restart_scores: outcomes.iter().map(|o| o.scored.score).collect(),
        cycles_per_restart: outcomes.iter().map(|o| o.cycles).collect(),
        hit_max_cycles: outcomes.iter().filter(|o| o.hit_max_cycles).count(),
        wall_time: start.elapsed(),
    })
}

/// Best score over unconstrained cell subsets (no rectangular structure):
/// the LTSS prefix scan applied to whole cells. Upper-bounds the
/// rectangular optimum; its null distribution is the reference point for
/// the theoretical critical values.
pub fn unconstrained_best_score(
    table: &CellTable,
    kind: ScoreKind,
    alpha_min: f64,
    alpha_max: f64,
) -> Result<ScoredAlpha> {
    check_window(alpha_min, alpha_max)?;
    if table.num_treatment_cells() == 0 {
        return Err(Error::NoTreatmentCells);
    }
    let ctx = ScanContext::new(table, alpha_min, alpha_max);
    let mut best = ScoredAlpha::zero(alpha_min);
    let mut best_set = false;
    let mut order: Vec<usize> = (0..ctx.cells.len()).collect();
    for (ai, &alpha) in ctx.grid.iter().enumerate() {
        order.sort_unstable_by(|&a, &b| {
            priority(ctx.cells[b].masses[ai], ctx.cells[b].count)
                .total_cmp(&priority(ctx.cells[a].masses[ai], ctx.cells[a].count))
                .then(a.cmp(&b))
        });
        let mut n_alpha = 0.0;
        let mut n_total = 0.0;
        for &c in &order {
            n_alpha += ctx.cells[c].masses[ai];
            n_total += ctx.cells[c].count;
            let score = kind.evaluate(n_alpha, n_total, alpha);
            if !best_set || score > best.score {
                best =
                    ScoredAlpha { alpha, score, mu_nate: kind.divergence(n_alpha, n_total, alpha) };
                best_set = true;
            }
        }
    }
    Ok(best)
}
