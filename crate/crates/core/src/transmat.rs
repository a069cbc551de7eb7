//! Heuristic per-level transition matrices estimated from ground-truth
//! micro-tubes: counting, row normalization, thresholding and sparsity stats.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorGrid, BBox};

/// A pair of temporally linked boxes at frames `t` and `t + delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroTube {
    pub box_t: BBox,
    pub box_td: BBox,
    pub delta: u32,
    pub class: Option<u32>,
    pub scores: Option<Vec<f64>>,
}

impl MicroTube {
    pub fn new(box_t: BBox, box_td: BBox, delta: u32) -> Result<Self> {
        if delta == 0 {
            return Err(Error::InvalidInput("micro-tube delta must be >= 1".into()));
        }
        Ok(MicroTube {
            box_t,
            box_td,
            delta,
            class: None,
            scores: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixMode {
    Counts,
    Normalized,
    Binary,
}

impl fmt::Display for MatrixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MatrixMode::Counts => "counts",
            MatrixMode::Normalized => "normalized",
            MatrixMode::Binary => "binary",
        };
        f.write_str(s)
    }
}

/// Sparse cell-to-cell matrix for one pyramid level. Entries are keyed by
/// `(i, j)` linear cell indices; rows are the cell at `t`, columns the cell
/// at `t + delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub level: usize,
    pub side: u32,
    pub mode: MatrixMode,
    entries: BTreeMap<(u32, u32), f64>,
}

impl TransitionMatrix {
    pub fn zero(level: usize, side: u32, mode: MatrixMode) -> Self {
        TransitionMatrix {
            level,
            side,
            mode,
            entries: BTreeMap::new(),
        }
    }

    /// Identity in binary mode: one entry per diagonal cell.
    pub fn identity_binary(level: usize, side: u32) -> Self {
        let mut m = TransitionMatrix::zero(level, side, MatrixMode::Binary);
        for c in 0..side * side {
            m.entries.insert((c, c), 1.0);
        }
        m
    }

    pub fn cells(&self) -> u32 {
        self.side * self.side
    }

    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, i: u32, j: u32, value: f64) {
        if value == 0.0 {
            self.entries.remove(&(i, j));
        } else {
            self.entries.insert((i, j), value);
        }
    }

    pub fn increment(&mut self, i: u32, j: u32) {
        *self.entries.entry((i, j)).or_insert(0.0) += 1.0;
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &v)| (i, j, v))
    }

    pub fn nonzero_count(&self) -> u64 {
        self.entries.len() as u64
    }

    /// Count of ones; meaningful for binary matrices.
    pub fn cardinality(&self) -> u64 {
        self.entries.values().filter(|&&v| v != 0.0).count() as u64
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn row_sum(&self, i: u32) -> f64 {
        self.entries
            .range((i, 0)..=(i, u32::MAX))
            .map(|(_, &v)| v)
            .sum()
    }

    pub fn populated_rows(&self) -> Vec<u32> {
        let mut rows: Vec<u32> = self.entries.keys().map(|&(i, _)| i).collect();
        rows.dedup();
        rows
    }

    /// Argmax column of row `i`; ties break to the lowest column.
    pub fn row_argmax(&self, i: u32) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for (&(_, j), &v) in self.entries.range((i, 0)..=(i, u32::MAX)) {
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((j, v)),
            }
        }
        best.map(|(j, _)| j)
    }

    /// Elementwise addition; the merge used when a micro-tube stream is
    /// fitted in parallel partitions.
    pub fn merge(&mut self, other: &TransitionMatrix) -> Result<()> {
        if self.mode != MatrixMode::Counts || other.mode != MatrixMode::Counts {
            return Err(Error::InvalidInput(
                "only count matrices can be merged".into(),
            ));
        }
        if self.side != other.side || self.level != other.level {
            return Err(Error::InvalidInput("matrix shape mismatch in merge".into()));
        }
        for (i, j, v) in other.iter() {
            *self.entries.entry((i, j)).or_insert(0.0) += v;
        }
        Ok(())
    }
}

/// One matrix per pyramid level plus fit provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    pub delta: u32,
    pub sample_count: u64,
    pub threshold: Option<f64>,
    pub matrices: Vec<TransitionMatrix>,
}

impl TransitionSet {
    pub fn mode(&self) -> Option<MatrixMode> {
        self.matrices.first().map(|m| m.mode)
    }

    pub fn total_count(&self) -> f64 {
        self.matrices.iter().map(|m| m.total()).sum()
    }

    pub fn cardinalities(&self) -> Vec<u64> {
        self.matrices.iter().map(|m| m.cardinality()).collect()
    }
}

/// Fits per-level count matrices from a stream of ground-truth micro-tubes.
///
/// For each micro-tube, every level proposes its argmax-IoU anchor pair for
/// the two boxes; the level whose pair has the highest mean IoU wins (ties
/// to the lowest level), and that level's `(i, j)` cell entry is
/// incremented. Exactly one increment happens per input micro-tube.
pub fn fit_transition_set(micro_tubes: &[MicroTube], grid: &AnchorGrid) -> Result<TransitionSet> {
    let config = grid.config();
    let mut matrices: Vec<TransitionMatrix> = config
        .levels
        .iter()
        .enumerate()
        .map(|(p, l)| TransitionMatrix::zero(p, l.side, MatrixMode::Counts))
        .collect();

    let delta = micro_tubes.first().map(|m| m.delta).unwrap_or(1);
    for (n, mt) in micro_tubes.iter().enumerate() {
        if mt.delta != delta {
            return Err(Error::InvalidInput(format!(
                "mixed deltas in micro-tube stream: {} then {} (record {})",
                delta, mt.delta, n
            )));
        }
        let mut best: Option<(usize, u32, u32, f64)> = None;
        for p in 0..grid.level_count() {
            let (ci, _, iou_i) = grid.best_anchor_for(&mt.box_t, p);
            let (cj, _, iou_j) = grid.best_anchor_for(&mt.box_td, p);
            let score = 0.5 * (iou_i + iou_j);
            let side = grid.side(p);
            if best.map(|(_, _, _, s)| score > s).unwrap_or(true) {
                best = Some((p, ci.linear(side), cj.linear(side), score));
            }
        }
        let (p, i, j, _) = best.expect("config has at least one level");
        matrices[p].increment(i, j);
    }

    Ok(TransitionSet {
        delta,
        sample_count: micro_tubes.len() as u64,
        threshold: None,
        matrices,
    })
}

/// Divides each entry of every populated row by the row sum. Zero rows stay
/// zero; no smoothing mass is invented.
pub fn normalize(m: &TransitionMatrix) -> Result<TransitionMatrix> {
    if m.mode == MatrixMode::Binary {
        return Err(Error::ModeMismatch {
            expected: MatrixMode::Counts,
            found: m.mode,
        });
    }
    let mut out = TransitionMatrix::zero(m.level, m.side, MatrixMode::Normalized);
    let mut row_sums: BTreeMap<u32, f64> = BTreeMap::new();
    for (i, _, v) in m.iter() {
        *row_sums.entry(i).or_insert(0.0) += v;
    }
    for (i, j, v) in m.iter() {
        let sum = row_sums[&i];
        if sum > 0.0 {
            out.set(i, j, v / sum);
        }
    }
    Ok(out)
}

pub fn normalize_set(ts: &TransitionSet) -> Result<TransitionSet> {
    Ok(TransitionSet {
        delta: ts.delta,
        sample_count: ts.sample_count,
        threshold: ts.threshold,
        matrices: ts
            .matrices
            .iter()
            .map(normalize)
            .collect::<Result<Vec<_>>>()?,
    })
}

/// Thresholds a normalized matrix into a binary one. An entry survives iff
/// its probability is `>= threshold` (inclusive, so a row keeping exactly
/// 10% of its mass survives the 0.1 default).
pub fn binarize(m: &TransitionMatrix, threshold: f64) -> Result<TransitionMatrix> {
    if m.mode != MatrixMode::Normalized {
        return Err(Error::ModeMismatch {
            expected: MatrixMode::Normalized,
            found: m.mode,
        });
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    let mut out = TransitionMatrix::zero(m.level, m.side, MatrixMode::Binary);
    for (i, j, v) in m.iter() {
        if v >= threshold {
            out.set(i, j, 1.0);
        }
    }
    Ok(out)
}

pub fn binarize_set(ts: &TransitionSet, threshold: f64) -> Result<TransitionSet> {
    Ok(TransitionSet {
        delta: ts.delta,
        sample_count: ts.sample_count,
        threshold: Some(threshold),
        matrices: ts
            .matrices
            .iter()
            .map(|m| binarize(m, threshold))
            .collect::<Result<Vec<_>>>()?,
    })
}

/// Off-diagonal statistics: mean off-diagonal row fraction over populated
/// rows, and the count of nonzero off-diagonal entries. Works on any mode;
/// for normalized matrices the fraction is probability mass directly.
pub fn offdiagonal_mass(m: &TransitionMatrix) -> (f64, u64) {
    let mut row_total: BTreeMap<u32, f64> = BTreeMap::new();
    let mut row_offdiag: BTreeMap<u32, f64> = BTreeMap::new();
    let mut offdiag_nonzero = 0u64;
    for (i, j, v) in m.iter() {
        *row_total.entry(i).or_insert(0.0) += v;
        if i != j {
            *row_offdiag.entry(i).or_insert(0.0) += v;
            if v != 0.0 {
                offdiag_nonzero += 1;
            }
        }
    }
    let populated: Vec<u32> = row_total
        .iter()
        .filter(|(_, &s)| s > 0.0)
        .map(|(&i, _)| i)
        .collect();
    if populated.is_empty() {
        return (0.0, offdiag_nonzero);
    }
    let mass: f64 = populated
        .iter()
        .map(|i| row_offdiag.get(i).copied().unwrap_or(0.0) / row_total[i])
        .sum::<f64>()
        / populated.len() as f64;
    (mass, offdiag_nonzero)
}
