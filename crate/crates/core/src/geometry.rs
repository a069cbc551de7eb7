//! Boxes, IoU and the anchor pyramid that every other stage indexes into.
//!
//! All coordinates are normalized to `[0, 1]`; pixel conversion is an I/O
//! concern. Anchor generation is pure: the same config and recipe always
//! produce a bit-identical anchor list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in normalized image coordinates.
///
/// Construction clamps every coordinate to `[0, 1]` and rejects non-finite
/// values or inverted corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        for v in [x_min, y_min, x_max, y_max] {
            if !v.is_finite() {
                return Err(Error::InvalidBox(format!("non-finite coordinate {v}")));
            }
        }
        let b = BBox {
            x_min: x_min.clamp(0.0, 1.0),
            y_min: y_min.clamp(0.0, 1.0),
            x_max: x_max.clamp(0.0, 1.0),
            y_max: y_max.clamp(0.0, 1.0),
        };
        if b.x_min > b.x_max || b.y_min > b.y_max {
            return Err(Error::InvalidBox(format!(
                "inverted corners [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(b)
    }

    /// Builds a box from possibly disordered or out-of-range corners by
    /// swapping min/max as needed and clamping. Used for jittered boxes.
    pub fn sanitized(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        BBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Box of width `w` and height `h` centered at `(cx, cy)`, clamped to the
    /// image.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> [f64; 4] {
        b.corners()
    }
}

/// Intersection over union. Returns 0 when the union is degenerate (both
/// boxes have zero area).
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One pyramid level: a square `side x side` feature grid with `r` anchors
/// per cell and feature depth `depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub side: u32,
    pub r: u32,
    pub depth: u32,
}

/// Ordered list of pyramid levels, largest grid first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: Vec<Level>,
}

impl PyramidConfig {
    /// The six-level default: sides 38/19/10/5/3/1 with 4/6/6/6/4/4 anchors
    /// per cell, totalling 8732 anchors.
    pub fn ssd_default() -> Self {
        let sides = [38u32, 19, 10, 5, 3, 1];
        let rs = [4u32, 6, 6, 6, 4, 4];
        let depths = [512u32, 1024, 512, 256, 256, 256];
        PyramidConfig {
            levels: sides
                .iter()
                .zip(rs)
                .zip(depths)
                .map(|((&side, r), depth)| Level { side, r, depth })
                .collect(),
        }
    }

    pub fn single_level(side: u32, r: u32, depth: u32) -> Self {
        PyramidConfig {
            levels: vec![Level { side, r, depth }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidConfig("no levels".into()));
        }
        for (p, level) in self.levels.iter().enumerate() {
            if level.side == 0 || level.r == 0 || level.depth == 0 {
                return Err(Error::InvalidConfig(format!(
                    "level {p}: side, r and depth must be positive"
                )));
            }
        }
        for w in self.levels.windows(2) {
            if w[1].side >= w[0].side {
                return Err(Error::InvalidConfig(format!(
                    "grid sides must be strictly decreasing, got {} then {}",
                    w[0].side, w[1].side
                )));
            }
        }
        Ok(())
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Cells on level `p`: side squared.
    pub fn cells(&self, p: usize) -> u32 {
        self.levels[p].side * self.levels[p].side
    }

    pub fn total_anchor_count(&self) -> u64 {
        self.levels
            .iter()
            .map(|l| u64::from(l.side) * u64::from(l.side) * u64::from(l.r))
            .sum()
    }
}

/// Grid cell address on one level. The linear index is `row * side + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub level: usize,
    pub row: u32,
    pub col: u32,
}

impl CellIndex {
    pub fn linear(&self, side: u32) -> u32 {
        self.row * side + self.col
    }

    pub fn from_linear(level: usize, side: u32, linear: u32) -> Self {
        CellIndex {
            level,
            row: linear / side,
            col: linear % side,
        }
    }
}

/// How per-level anchor scales are chosen.
///
/// The grid layout fixes only the anchor counts; box sizes are a recipe
/// choice, so the recipe is injectable configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScaleMode {
    /// Scales linearly spaced from `min` (largest grid) to `max` (smallest
    /// grid). A single-level pyramid gets the midpoint scale.
    Linear { min: f64, max: f64 },
    /// Each aspect-1 anchor spans exactly its own grid cell. On a side-1
    /// level the single square anchor is the full image.
    CellExtent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecipe {
    pub scales: ScaleMode,
}

impl Default for AnchorRecipe {
    fn default() -> Self {
        AnchorRecipe {
            scales: ScaleMode::Linear { min: 0.2, max: 0.9 },
        }
    }
}

impl AnchorRecipe {
    pub fn cell_extent() -> Self {
        AnchorRecipe {
            scales: ScaleMode::CellExtent,
        }
    }

    fn scale(&self, level: usize, level_count: usize, side: u32) -> f64 {
        match self.scales {
            ScaleMode::Linear { min, max } => {
                if level_count == 1 {
                    0.5 * (min + max)
                } else {
                    min + (max - min) * level as f64 / (level_count - 1) as f64
                }
            }
            ScaleMode::CellExtent => 1.0 / f64::from(side),
        }
    }

    fn next_scale(&self, level: usize, level_count: usize, sides: &[u32]) -> f64 {
        match self.scales {
            ScaleMode::Linear { .. } => {
                if level + 1 < level_count {
                    self.scale(level + 1, level_count, sides[level + 1])
                } else {
                    1.0
                }
            }
            ScaleMode::CellExtent => (2.0 / f64::from(sides[level])).min(1.0),
        }
    }

    /// `(width, height)` of the anchor at `slot` given the level scale `s`
    /// and the next-level scale `s_next`.
    ///
    /// Slot 0 is the square box at scale `s`; slot 1 the extra square box at
    /// the geometric mean of `s` and `s_next`; remaining slots alternate
    /// aspect ratios 2, 1/2, 3, 1/3, ...
    fn slot_shape(slot: u32, s: f64, s_next: f64) -> (f64, f64) {
        match slot {
            0 => (s, s),
            1 => {
                let g = (s * s_next).sqrt();
                (g, g)
            }
            _ => {
                let k = (slot - 2) / 2 + 2; // 2, 2, 3, 3, 4, 4, ...
                let ar = if slot % 2 == 0 {
                    f64::from(k)
                } else {
                    1.0 / f64::from(k)
                };
                (s * ar.sqrt(), s / ar.sqrt())
            }
        }
    }
}

struct LevelAnchors {
    side: u32,
    r: u32,
    boxes: Vec<BBox>, // cell-major, slot-minor
}

/// All anchor boxes of a pyramid, cell-major within each level.
pub struct AnchorGrid {
    config: PyramidConfig,
    levels: Vec<LevelAnchors>,
}

impl AnchorGrid {
    pub fn build(config: &PyramidConfig, recipe: &AnchorRecipe) -> Result<Self> {
        config.validate()?;
        let sides: Vec<u32> = config.levels.iter().map(|l| l.side).collect();
        let count = config.level_count();
        let mut levels = Vec::with_capacity(count);
        for (p, level) in config.levels.iter().enumerate() {
            let s = recipe.scale(p, count, level.side);
            let s_next = recipe.next_scale(p, count, &sides);
            let side = level.side;
            let mut boxes = Vec::with_capacity((side * side * level.r) as usize);
            for row in 0..side {
                for col in 0..side {
                    let cx = (f64::from(col) + 0.5) / f64::from(side);
                    let cy = (f64::from(row) + 0.5) / f64::from(side);
                    for slot in 0..level.r {
                        let (w, h) = AnchorRecipe::slot_shape(slot, s, s_next);
                        boxes.push(BBox::centered(cx, cy, w, h)?);
                    }
                }
            }
            levels.push(LevelAnchors {
                side,
                r: level.r,
                boxes,
            });
        }
        Ok(AnchorGrid {
            config: config.clone(),
            levels,
        })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.config
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn side(&self, level: usize) -> u32 {
        self.levels[level].side
    }

    pub fn anchors_per_cell(&self, level: usize) -> u32 {
        self.levels[level].r
    }

    pub fn level_anchor_count(&self, level: usize) -> usize {
        self.levels[level].boxes.len()
    }

    pub fn total_anchor_count(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn anchor(&self, level: usize, cell_linear: u32, slot: u32) -> &BBox {
        let l = &self.levels[level];
        &l.boxes[(cell_linear * l.r + slot) as usize]
    }

    /// Iterates `(cell, slot, box)` over one level in cell-major order.
    pub fn iter_level(&self, level: usize) -> impl Iterator<Item = (CellIndex, u32, &BBox)> {
        let l = &self.levels[level];
        l.boxes.iter().enumerate().map(move |(i, b)| {
            let linear = i as u32 / l.r;
            let slot = i as u32 % l.r;
            (CellIndex::from_linear(level, l.side, linear), slot, b)
        })
    }

    /// Argmax-IoU anchor on one level. Ties break to the lowest linear cell
    /// index, then the lowest slot, which the scan order guarantees.
    pub fn best_anchor_for(&self, b: &BBox, level: usize) -> (CellIndex, u32, f64) {
        let l = &self.levels[level];
        let mut best = (0u32, 0u32, f64::NEG_INFINITY);
        for (i, anchor) in l.boxes.iter().enumerate() {
            let v = iou(b, anchor);
            if v > best.2 {
                best = (i as u32 / l.r, i as u32 % l.r, v);
            }
        }
        (
            CellIndex::from_linear(level, l.side, best.0),
            best.1,
            best.2.max(0.0),
        )
    }
}

/// Builds the grid with the default recipe.
pub fn build_anchor_grid(config: &PyramidConfig) -> Result<AnchorGrid> {
    AnchorGrid::build(config, &AnchorRecipe::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bb(c: [f64; 4]) -> BBox {
        BBox::new(c[0], c[1], c[2], c[3]).unwrap()
    }

    /// Counting oracle: rasterize both boxes on an n x n grid and count
    /// covered pixels. Independent of the analytic area arithmetic.
    fn iou_rasterized(a: &BBox, b: &BBox, n: usize) -> f64 {
        let hit = |bx: &BBox, x: f64, y: f64| {
            x >= bx.x_min() && x < bx.x_max() && y >= bx.y_min() && y < bx.y_max()
        };
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let y = (j as f64 + 0.5) / n as f64;
                let (ia, ib) = (hit(a, x, y), hit(b, x, y));
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn box_construction_clamps_and_validates() {
        let b = BBox::new(-0.5, 0.2, 1.5, 0.8).unwrap();
        assert_eq!(b.corners(), [0.0, 0.2, 1.0, 0.8]);
        assert!(BBox::new(0.5, 0.5, 0.2, 0.8).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        // clamping can resolve an inversion that only exists out of range
        assert!(BBox::new(1.2, 0.0, 1.1, 1.0).is_ok());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bb([0.0, 0.0, 0.5, 0.5]);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bb([0.0, 0.0, 0.2, 0.2]);
        let c = bb([0.5, 0.5, 0.9, 0.9]);
        assert_eq!(iou(&b, &c), 0.0);
    }

    #[test]
    fn iou_partial_overlap_matches_hand_arithmetic_and_raster_oracle() {
        // inter = 0.1 * 0.2 = 0.02, union = 0.04 + 0.04 - 0.02 = 0.06
        let a = bb([0.0, 0.0, 0.2, 0.2]);
        let b = bb([0.1, 0.0, 0.3, 0.2]);
        assert_abs_diff_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou(&a, &b), iou_rasterized(&a, &b, 1000), epsilon = 2e-3);
    }

    #[test]
    fn iou_degenerate_zero_area_boxes() {
        let a = bb([0.3, 0.3, 0.3, 0.3]);
        assert_eq!(iou(&a, &a), 0.0);
    }

    #[test]
    fn default_pyramid_counts() {
        let cfg = PyramidConfig::ssd_default();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_anchor_count(), 8732);
        let grid = build_anchor_grid(&cfg).unwrap();
        assert_eq!(grid.total_anchor_count(), 8732);
        // level 4 is the 3x3 grid with r = 4
        assert_eq!(grid.level_anchor_count(4), 36);
    }

    #[test]
    fn side_three_level_has_36_anchors() {
        let cfg = PyramidConfig::single_level(3, 4, 256);
        let grid = build_anchor_grid(&cfg).unwrap();
        assert_eq!(grid.total_anchor_count(), 36);
    }

    #[test]
    fn side_one_single_anchor_covers_image_with_cell_extent_recipe() {
        let cfg = PyramidConfig::single_level(1, 1, 64);
        let grid = AnchorGrid::build(&cfg, &AnchorRecipe::cell_extent()).unwrap();
        assert_eq!(grid.total_anchor_count(), 1);
        assert_eq!(grid.anchor(0, 0, 0).corners(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PyramidConfig::single_level(0, 4, 256).validate().is_err());
        assert!(PyramidConfig::single_level(3, 0, 256).validate().is_err());
        let increasing = PyramidConfig {
            levels: vec![Level {
                side: 3,
                r: 4,
                depth: 8,
            }, Level {
                side: 5,
                r: 4,
                depth: 8,
            }],
        };
        assert!(increasing.validate().is_err());
        assert!(PyramidConfig { levels: vec![] }.validate().is_err());
    }

    #[test]
    fn anchor_generation_is_deterministic() {
        let cfg = PyramidConfig::ssd_default();
        let a = build_anchor_grid(&cfg).unwrap();
        let b = build_anchor_grid(&cfg).unwrap();
        for p in 0..cfg.level_count() {
            let ax: Vec<_> = a.iter_level(p).map(|(_, _, b)| b.corners()).collect();
            let bx: Vec<_> = b.iter_level(p).map(|(_, _, b)| b.corners()).collect();
            assert_eq!(ax, bx);
        }
    }

    #[test]
    fn best_anchor_exact_match_and_full_image() {
        let cfg = PyramidConfig::single_level(3, 4, 256);
        let grid = build_anchor_grid(&cfg).unwrap();
        let target = *grid.anchor(0, 4, 2);
        let (cell, slot, v) = grid.best_anchor_for(&target, 0);
        assert_eq!((cell.linear(3), slot), (4, 2));
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);

        let cfg1 = PyramidConfig::single_level(1, 1, 64);
        let grid1 = AnchorGrid::build(&cfg1, &AnchorRecipe::cell_extent()).unwrap();
        let full = bb([0.0, 0.0, 1.0, 1.0]);
        let (cell, _, v) = grid1.best_anchor_for(&full, 0);
        assert_eq!((cell.row, cell.col), (0, 0));
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(c in proptest::array::uniform8(0.0f64..1.0)) {
            let a = BBox::sanitized(c[0], c[1], c[2], c[3]).unwrap();
            let b = BBox::sanitized(c[4], c[5], c[6], c[7]).unwrap();
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        /// Exhaustive-scan oracle: the argmax over an explicit loop of all
        /// 36 anchors must agree with best_anchor_for.
        #[test]
        fn best_anchor_matches_exhaustive_scan(c in proptest::array::uniform4(0.0f64..1.0)) {
            let bx = BBox::sanitized(c[0], c[1], c[2], c[3]).unwrap();
            let cfg = PyramidConfig::single_level(3, 4, 256);
            let grid = build_anchor_grid(&cfg).unwrap();

            let mut best = (0u32, 0u32, f64::NEG_INFINITY);
            for cell in 0..9u32 {
                for slot in 0..4u32 {
                    let v = iou(&bx, grid.anchor(0, cell, slot));
                    if v > best.2 {
                        best = (cell, slot, v);
                    }
                }
            }
            let (cell, slot, v) = grid.best_anchor_for(&bx, 0);
            prop_assert_eq!((cell.linear(3), slot), (best.0, best.1));
            prop_assert!((v - best.2.max(0.0)).abs() < 1e-12);
        }
    }
}
