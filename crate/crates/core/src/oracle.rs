//! Brute-force exhaustive maximization over rectangular subpopulations.
//!
//! Exists to validate the scanner on small instances: subset scores go
//! through the same evaluation paths the scanner uses, so agreement can be
//! asserted at zero tolerance.

use crate::data::{CellTable, Subpopulation};
use crate::error::{Error, Result};
use crate::scan::ScanContext;
use crate::score::{check_window, max_over_alpha, ScoreKind};

/// Default cap on the number of rectangular subsets to enumerate.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Result of exhaustive enumeration.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best: Subpopulation,
    pub score: f64,
    pub alpha: f64,
    /// Always the full product of per-mode non-empty subset counts.
    pub subsets_evaluated: u128,
}

fn rectangle_count(table: &CellTable) -> Option<u128> {
    let schema = table.schema();
    let mut count: u128 = 1;
    for j in 0..schema.d() {
        let arity = schema.arity(j);
        if arity >= 127 {
            return None;
        }
        let per_mode = (1u128 << arity) - 1;
        count = count.checked_mul(per_mode)?;
    }
    Some(count)
}

/// Evaluates every rectangular subpopulation at every candidate alpha and
/// returns the maximizer. Enumeration is lexicographic over per-mode value
/// bitmasks (last mode fastest); ties keep the first subset encountered,
/// and within a subset the smaller alpha, matching the scanner's
/// tie-breaking.
///
/// Refuses instances whose rectangle count exceeds `cap`
/// (default [`DEFAULT_ENUMERATION_CAP`]).
pub fn exhaustive_scan(
    table: &CellTable,
    kind: ScoreKind,
    alpha_min: f64,
    alpha_max: f64,
    cap: Option<u128>,
) -> Result<OracleResult> {
    check_window(alpha_min, alpha_max)?;
    if table.num_treatment_cells() == 0 {
        return Err(Error::NoTreatmentCells);
    }
    let cap = cap.unwrap_or(DEFAULT_ENUMERATION_CAP);
    let count = rectangle_count(table).unwrap_or(u128::MAX);
    if count > cap {
        return Err(Error::EnumerationTooLarge { count, cap });
    }

    let schema = table.schema();
    let d = schema.d();
    let mut masks: Vec<u64> = vec![1; d];
    let mut best: Option<(Subpopulation, f64, f64)> = None;
    loop {
        let sub = Subpopulation::from_flags(
            (0..d)
                .map(|j| (0..schema.arity(j)).map(|v| masks[j] >> v & 1 == 1).collect())
                .collect(),
        );
        let scored = max_over_alpha(&sub, table, kind, alpha_min, alpha_max)?;
        let better = match &best {
            None => true,
            Some((_, score, _)) => scored.score > *score,
        };
        if better {
            best = Some((sub, scored.score, scored.alpha));
        }

        // Odometer step over per-mode masks, last mode fastest.
        let mut j = d;
        loop {
            if j == 0 {
                let (sub, score, alpha) = best.expect("at least one subset evaluated");
                return Ok(OracleResult { best: sub, score, alpha, subsets_evaluated: count });
            }
            j -= 1;
            let max_mask = (1u64 << schema.arity(j)) - 1;
            if masks[j] < max_mask {
                masks[j] += 1;
                break;
            }
            masks[j] = 1;
        }
    }
}

/// Exhaustively maximizes over all non-empty value subsets of one mode,
/// holding the other modes at `sub`'s subsets. Ground truth for the
/// prefix-based mode optimization; both score subsets through the same
/// aggregation path.
pub fn exhaustive_mode(
    mode: usize,
    sub: &Subpopulation,
    table: &CellTable,
    kind: ScoreKind,
    alpha_min: f64,
    alpha_max: f64,
) -> Result<(Vec<usize>, f64)> {
    check_window(alpha_min, alpha_max)?;
    let schema = table.schema();
    if mode >= schema.d() {
        return Err(Error::InvalidParameter(format!("mode {mode} out of range")));
    }
    let arity = schema.arity(mode);
    if arity > 20 {
        return Err(Error::EnumerationTooLarge {
            count: (1u128 << arity) - 1,
            cap: (1u128 << 20) - 1,
        });
    }

    let ctx = ScanContext::new(table, alpha_min, alpha_max);
    let agg = ctx.mode_aggregates(mode, sub);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_mask: u64 = 1;
    let mut members: Vec<usize> = Vec::with_capacity(arity);
    for (ai, &alpha) in ctx.grid().iter().enumerate() {
        for mask in 1..(1u64 << arity) {
            members.clear();
            members.extend((0..arity).filter(|&v| mask >> v & 1 == 1));
            let (score, _, _) = agg.score_subset(members.iter().copied(), ai, alpha, kind);
            if score > best_score {
                best_score = score;
                best_mask = mask;
            }
        }
    }
    let values = (0..arity).filter(|&v| best_mask >> v & 1 == 1).collect();
    Ok((values, best_score))
}
