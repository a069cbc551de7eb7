//! Frame-level and tube-level detection metrics: spatio-temporal tube IoU,
//! all-points average precision, frame-AP and video-mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::tubes::ActionTube;

/// Dense ground-truth tube: one box per frame from `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTube {
    pub video_id: String,
    pub class: u32,
    pub start: u32,
    pub boxes: Vec<BBox>,
}

impl GroundTruthTube {
    pub fn end(&self) -> u32 {
        self.start + self.boxes.len() as u32 - 1
    }
}

/// Spatio-temporal overlap: (temporal intersection / temporal union) times
/// the mean per-frame box IoU over the temporal intersection. Zero when the
/// tubes are temporally disjoint.
pub fn tube_iou(a_start: u32, a_boxes: &[BBox], b_start: u32, b_boxes: &[BBox]) -> f64 {
    if a_boxes.is_empty() || b_boxes.is_empty() {
        return 0.0;
    }
    let a_end = a_start + a_boxes.len() as u32 - 1;
    let b_end = b_start + b_boxes.len() as u32 - 1;
    let inter_start = a_start.max(b_start);
    let inter_end = a_end.min(b_end);
    if inter_start > inter_end {
        return 0.0;
    }
    let inter = f64::from(inter_end - inter_start + 1);
    let union = f64::from(a_end.max(b_end) - a_start.min(b_start) + 1);
    let mut spatial = 0.0;
    for t in inter_start..=inter_end {
        let a = &a_boxes[(t - a_start) as usize];
        let b = &b_boxes[(t - b_start) as usize];
        spatial += iou(a, b);
    }
    (inter / union) * (spatial / inter)
}

/// Per-detection match outcome, in score-descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: bool,
    pub gt_index: Option<usize>,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub matches: Vec<MatchResult>,
}

/// All-points average precision.
///
/// `scored` holds one row per detection: its score and its overlap with
/// every ground truth of the same class (zero for different videos).
/// Detections are visited in descending score order (stable on ties); each
/// claims its best still-unmatched ground truth at overlap >= `threshold`.
pub fn average_precision(scored: &[(f64, Vec<f64>)], n_gt: usize, threshold: f64) -> ApResult {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .0
            .partial_cmp(&scored[a].0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut gt_taken = vec![false; n_gt];
    let mut matches = vec![
        MatchResult {
            tp: false,
            gt_index: None,
            overlap: 0.0,
        };
        scored.len()
    ];
    let mut tp_flags = Vec::with_capacity(scored.len());
    for &d in &order {
        let overlaps = &scored[d].1;
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in overlaps.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            if best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= threshold => {
                gt_taken[g] = true;
                matches[d] = MatchResult {
                    tp: true,
                    gt_index: Some(g),
                    overlap: v,
                };
                tp_flags.push(true);
            }
            Some((_, v)) => {
                matches[d].overlap = v;
                tp_flags.push(false);
            }
            None => tp_flags.push(false),
        }
    }

    if n_gt == 0 {
        return ApResult { ap: 0.0, matches };
    }

    // precision/recall at every rank cutoff, integrated with the
    // monotone precision envelope
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp_cum = 0usize;
    for (k, &tp) in tp_flags.iter().enumerate() {
        if tp {
            tp_cum += 1;
        }
        precisions.push(tp_cum as f64 / (k + 1) as f64);
        recalls.push(tp_cum as f64 / n_gt as f64);
    }
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recalls.len() {
        ap += (recalls[k] - prev_recall) * envelope[k];
        prev_recall = recalls[k];
    }
    ApResult { ap, matches }
}

/// Mean AP over classes that have at least one ground truth; classes
/// without any ground truth are excluded from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub per_class: BTreeMap<u32, f64>,
    pub map: f64,
}

fn mean_ap(per_class: BTreeMap<u32, f64>) -> MapResult {
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    MapResult { per_class, map }
}

/// Video-mAP: whole tubes matched by spatio-temporal tube IoU.
pub fn video_map(tubes: &[ActionTube], gts: &[GroundTruthTube], threshold: f64) -> MapResult {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = BTreeMap::new();
    for class in classes {
        let class_gts: Vec<&GroundTruthTube> = gts.iter().filter(|g| g.class == class).collect();
        let scored: Vec<(f64, Vec<f64>)> = tubes
            .iter()
            .filter(|t| t.class == class)
            .map(|t| {
                let overlaps = class_gts
                    .iter()
                    .map(|g| {
                        if g.video_id == t.video_id {
                            tube_iou(t.start, &t.boxes, g.start, &g.boxes)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (t.score, overlaps)
            })
            .collect();
        let ap = average_precision(&scored, class_gts.len(), threshold).ap;
        per_class.insert(class, ap);
    }
    mean_ap(per_class)
}

/// Frame-AP: every (frame, box) of a tube is an independent detection with
/// the tube's per-frame score, matched by box IoU within the same frame.
pub fn frame_map(tubes: &[ActionTube], gts: &[GroundTruthTube], threshold: f64) -> MapResult {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = BTreeMap::new();
    for class in classes {
        // ground-truth frames of this class
        let mut gt_frames: Vec<(&str, u32, &BBox)> = Vec::new();
        for g in gts.iter().filter(|g| g.class == class) {
            for (k, b) in g.boxes.iter().enumerate() {
                gt_frames.push((&g.video_id, g.start + k as u32, b));
            }
        }
        let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
        for t in tubes.iter().filter(|t| t.class == class) {
            for (k, b) in t.boxes.iter().enumerate() {
                let frame = t.start + k as u32;
                let overlaps = gt_frames
                    .iter()
                    .map(|&(vid, gframe, gbox)| {
                        if vid == t.video_id && gframe == frame {
                            iou(b, gbox)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                scored.push((t.frame_scores[k], overlaps));
            }
        }
        let ap = average_precision(&scored, gt_frames.len(), threshold).ap;
        per_class.insert(class, ap);
    }
    mean_ap(per_class)
}
