//! Anchor micro-tube enumeration from binarized transition matrices and the
//! pooling/head shape accounting that goes with it. Shape and index work
//! only; no feature tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorGrid, BBox, CellIndex, PyramidConfig};
use crate::transmat::{MatrixMode, TransitionSet};

/// A proposal: the same anchor slot at two (possibly equal) cells of one
/// level. `cell_i == cell_j` makes it an anchor cuboid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorMicroTube {
    pub level: usize,
    pub cell_i: CellIndex,
    pub cell_j: CellIndex,
    pub slot: u32,
    pub box_i: BBox,
    pub box_j: BBox,
}

impl AnchorMicroTube {
    pub fn is_cuboid(&self) -> bool {
        self.cell_i == self.cell_j
    }
}

/// A 3x3 window of linear cell indices centered on one cell; `None` marks a
/// zero-padding slot outside the grid.
pub type CellWindow = [Option<u32>; 9];

fn window(side: u32, center: u32) -> CellWindow {
    let row = (center / side) as i64;
    let col = (center % side) as i64;
    let mut out = [None; 9];
    for dr in -1..=1i64 {
        for dc in -1..=1i64 {
            let (r, c) = (row + dr, col + dc);
            let k = ((dr + 1) * 3 + (dc + 1)) as usize;
            if r >= 0 && c >= 0 && r < i64::from(side) && c < i64::from(side) {
                out[k] = Some((r * i64::from(side) + c) as u32);
            }
        }
    }
    out
}

/// One selected `(level, i, j)` region: the two windows to pool from and
/// the stacked feature shape `[2, 3, 3, depth]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingRegion {
    pub level: usize,
    pub cell_i: u32,
    pub cell_j: u32,
    pub window_i: CellWindow,
    pub window_j: CellWindow,
    pub stacked_shape: [u32; 4],
}

/// Per-level fully connected head dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub level: usize,
    /// Flattened pooled feature length, 2 * 3 * 3 * depth = 18 * depth.
    pub input_len: u32,
    /// (C + 1) * r classification outputs per cell region.
    pub classification_outputs: u32,
    /// 2 * 4 * r regression outputs per cell region.
    pub regression_outputs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingPlan {
    pub regions: Vec<PoolingRegion>,
    /// Total selected cell regions, the sum of the binary cardinalities.
    pub m_total: u64,
    pub head_shapes: Vec<HeadShape>,
}

fn require_binary(ts: &TransitionSet) -> Result<()> {
    for m in &ts.matrices {
        if m.mode != MatrixMode::Binary {
            return Err(Error::ModeMismatch {
                expected: MatrixMode::Binary,
                found: m.mode,
            });
        }
    }
    Ok(())
}

/// Emits one micro-tube per anchor slot for every 1-entry of every level, in
/// (level, i, j, slot) order. Total = sum over levels of cardinality * r.
pub fn enumerate_proposals(ts: &TransitionSet, grid: &AnchorGrid) -> Result<Vec<AnchorMicroTube>> {
    require_binary(ts)?;
    if ts.matrices.len() != grid.level_count() {
        return Err(Error::InvalidInput(format!(
            "transition set has {} levels, grid has {}",
            ts.matrices.len(),
            grid.level_count()
        )));
    }
    let mut out = Vec::new();
    for (p, m) in ts.matrices.iter().enumerate() {
        let side = grid.side(p);
        if m.side != side {
            return Err(Error::InvalidInput(format!(
                "level {p}: matrix side {} does not match grid side {side}",
                m.side
            )));
        }
        let r = grid.anchors_per_cell(p);
        for (i, j, v) in m.iter() {
            if v == 0.0 {
                continue;
            }
            for slot in 0..r {
                out.push(AnchorMicroTube {
                    level: p,
                    cell_i: CellIndex::from_linear(p, side, i),
                    cell_j: CellIndex::from_linear(p, side, j),
                    slot,
                    box_i: *grid.anchor(p, i, slot),
                    box_j: *grid.anchor(p, j, slot),
                });
            }
        }
    }
    Ok(out)
}

/// Builds the pooling windows and head shapes for a binarized set.
pub fn pooling_plan(
    ts: &TransitionSet,
    config: &PyramidConfig,
    class_count: u32,
) -> Result<PoolingPlan> {
    require_binary(ts)?;
    config.validate()?;
    if class_count < 1 {
        return Err(Error::InvalidInput("class count must be >= 1".into()));
    }
    if ts.matrices.len() != config.level_count() {
        return Err(Error::InvalidInput(format!(
            "transition set has {} levels, config has {}",
            ts.matrices.len(),
            config.level_count()
        )));
    }
    let mut regions = Vec::new();
    let mut m_total = 0u64;
    for (p, m) in ts.matrices.iter().enumerate() {
        let level = &config.levels[p];
        if m.side != level.side {
            return Err(Error::InvalidInput(format!(
                "level {p}: matrix side {} does not match config side {}",
                m.side, level.side
            )));
        }
        for (i, j, v) in m.iter() {
            if v == 0.0 {
                continue;
            }
            m_total += 1;
            regions.push(PoolingRegion {
                level: p,
                cell_i: i,
                cell_j: j,
                window_i: window(level.side, i),
                window_j: window(level.side, j),
                stacked_shape: [2, 3, 3, level.depth],
            });
        }
    }
    let head_shapes = config
        .levels
        .iter()
        .enumerate()
        .map(|(p, l)| HeadShape {
            level: p,
            input_len: 18 * l.depth,
            classification_outputs: (class_count + 1) * l.r,
            regression_outputs: 2 * 4 * l.r,
        })
        .collect();
    Ok(PoolingPlan {
        regions,
        m_total,
        head_shapes,
    })
}
