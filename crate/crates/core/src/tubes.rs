//! Online action-tube construction from detection micro-tubes: greedy
//! forward-only linking, linear interpolation to dense per-frame tubes,
//! two-state dynamic-programming temporal trimming and two-stream mean
//! fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTag {
    Appearance,
    Flow,
    Fused,
}

/// One detection micro-tube: boxes at `t` and `t + delta` plus per-class
/// confidence scores (index 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub t: u32,
    pub delta: u32,
    pub box_t: BBox,
    pub box_td: BBox,
    pub scores: Vec<f64>,
    pub stream: StreamTag,
}

impl Detection {
    /// Foreground class with the highest score, or None when background
    /// dominates. Ties break to the lowest class id.
    pub fn argmax_class(&self) -> Option<u32> {
        let mut best = 0usize;
        for (c, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = c;
            }
        }
        if best == 0 {
            None
        } else {
            Some(best as u32)
        }
    }
}

/// A class-labeled tube with exactly one box per frame of `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTube {
    pub video_id: String,
    pub class: u32,
    pub start: u32,
    pub end: u32,
    pub boxes: Vec<BBox>,
    pub frame_scores: Vec<f64>,
    /// Arithmetic mean of the member detection scores.
    pub score: f64,
}

impl ActionTube {
    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false // a tube always spans at least one frame
    }
}

/// Tube draft with boxes only at micro-tube endpoint frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTube {
    pub video_id: String,
    pub class: u32,
    /// Strictly increasing endpoint frames with their boxes.
    pub endpoints: Vec<(u32, BBox)>,
    /// One score per segment between consecutive endpoints.
    pub segment_scores: Vec<f64>,
    /// Scores of the member detections, for the aggregate.
    pub detection_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Weight of the IoU term in the linking score.
    pub eta: f64,
    /// Minimum IoU between a path's trailing box and a candidate's leading
    /// box for the pair to be matchable.
    pub iou_gate: f64,
    /// Consecutive unmatched steps before a live path is terminated.
    pub patience: u32,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            eta: 1.0,
            iou_gate: 0.1,
            patience: 3,
        }
    }
}

struct LivePath {
    id: u64,
    endpoints: Vec<(u32, BBox)>,
    segment_scores: Vec<f64>,
    detection_scores: Vec<f64>,
    misses: u32,
}

impl LivePath {
    fn trailing(&self) -> (u32, BBox) {
        *self.endpoints.last().expect("paths start with endpoints")
    }
}

fn mean_box(a: &BBox, b: &BBox) -> BBox {
    let ca = a.corners();
    let cb = b.corners();
    BBox::new(
        0.5 * (ca[0] + cb[0]),
        0.5 * (ca[1] + cb[1]),
        0.5 * (ca[2] + cb[2]),
        0.5 * (ca[3] + cb[3]),
    )
    .expect("mean of valid boxes is valid")
}

fn validate_stream(detections: &[Detection]) -> Result<u32> {
    let mut last_t = 0u32;
    let mut delta = None;
    let mut scores_len = None;
    for (k, d) in detections.iter().enumerate() {
        if k > 0 && d.t < last_t {
            return Err(Error::InvalidInput(format!(
                "detections not sorted by t at record {k} ({} after {last_t})",
                d.t
            )));
        }
        last_t = d.t;
        if d.delta == 0 {
            return Err(Error::InvalidInput(format!(
                "detection delta must be >= 1 (record {k})"
            )));
        }
        match delta {
            None => delta = Some(d.delta),
            Some(dl) if dl != d.delta => {
                return Err(Error::InvalidInput(format!(
                    "mixed deltas in detection stream: {dl} then {} (record {k})",
                    d.delta
                )));
            }
            _ => {}
        }
        match scores_len {
            None => scores_len = Some(d.scores.len()),
            Some(n) if n != d.scores.len() => {
                return Err(Error::InvalidInput(format!(
                    "inconsistent score vector length at record {k}"
                )));
            }
            _ => {}
        }
        if d.scores.len() < 2 {
            return Err(Error::InvalidInput(
                "score vectors need background plus at least one class".into(),
            ));
        }
        if d.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidInput(format!(
                "scores outside [0, 1] at record {k}"
            )));
        }
    }
    Ok(delta.unwrap_or(1))
}

/// Builds per-class tubes from a time-sorted detection stream in a single
/// forward pass.
///
/// At each step of the `delta` lattice, live paths and the step's
/// candidates (detections whose argmax class is the path's class) are
/// greedily matched in descending `class_score + eta * IoU` order, gated by
/// IoU; unmatched candidates start new paths and paths unmatched for
/// `patience` consecutive steps are closed. Returns dense tubes.
pub fn link_online(
    video_id: &str,
    detections: &[Detection],
    params: &LinkParams,
) -> Result<Vec<ActionTube>> {
    let sparse = link_online_sparse(video_id, detections, params)?;
    Ok(sparse.iter().map(interpolate).collect())
}

/// Same as [`link_online`] but returns the endpoint-sparse tubes.
pub fn link_online_sparse(
    video_id: &str,
    detections: &[Detection],
    params: &LinkParams,
) -> Result<Vec<SparseTube>> {
    let delta = validate_stream(detections)?;
    if detections.is_empty() {
        return Ok(Vec::new());
    }
    let class_count = detections[0].scores.len() - 1;
    let t_first = detections[0].t;
    for (k, d) in detections.iter().enumerate() {
        if (d.t - t_first) % delta != 0 {
            return Err(Error::InvalidInput(format!(
                "detection at t={} is off the delta-{delta} lattice (record {k})",
                d.t
            )));
        }
    }

    // candidate pool per class, keyed by timestep
    let mut pools: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (idx, d) in detections.iter().enumerate() {
        if let Some(c) = d.argmax_class() {
            pools.entry(c).or_default().entry(d.t).or_default().push(idx);
        }
    }

    let t_min = detections.first().map(|d| d.t).unwrap_or(0);
    let t_max = detections.last().map(|d| d.t).unwrap_or(0);

    let mut tubes = Vec::new();
    for class in 1..=class_count as u32 {
        let Some(by_step) = pools.get(&class) else {
            continue;
        };
        let mut next_id = 0u64;
        let mut live: Vec<LivePath> = Vec::new();
        let mut done: Vec<LivePath> = Vec::new();

        let mut t = t_min;
        loop {
            let empty = Vec::new();
            let cands = by_step.get(&t).unwrap_or(&empty);

            // score all gated (path, candidate) pairs
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (pi, path) in live.iter().enumerate() {
                let (_, trail) = path.trailing();
                for (ci, &di) in cands.iter().enumerate() {
                    let d = &detections[di];
                    let overlap = iou(&trail, &d.box_t);
                    if overlap >= params.iou_gate {
                        let s = d.scores[class as usize] + params.eta * overlap;
                        pairs.push((s, pi, ci));
                    }
                }
            }
            pairs.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| live[a.1].id.cmp(&live[b.1].id))
                    .then_with(|| a.2.cmp(&b.2))
            });

            let mut path_taken = vec![false; live.len()];
            let mut cand_taken = vec![false; cands.len()];
            for (_, pi, ci) in pairs {
                if path_taken[pi] || cand_taken[ci] {
                    continue;
                }
                path_taken[pi] = true;
                cand_taken[ci] = true;
                let d = &detections[cands[ci]];
                let score = d.scores[class as usize];
                let path = &mut live[pi];
                let (trail_t, trail_box) = path.trailing();
                if trail_t == d.t {
                    // shared frame: reconcile the provisional trailing box
                    // with the new leading box
                    let merged = mean_box(&trail_box, &d.box_t);
                    path.endpoints.last_mut().expect("nonempty").1 = merged;
                } else {
                    // gap bridged within patience; the gap segment carries
                    // the bridging detection's score
                    path.endpoints.push((d.t, d.box_t));
                    path.segment_scores.push(score);
                }
                path.endpoints.push((d.t + delta, d.box_td));
                path.segment_scores.push(score);
                path.detection_scores.push(score);
                path.misses = 0;
            }

            // age out unmatched paths
            let mut still_live = Vec::new();
            for (pi, mut path) in live.into_iter().enumerate() {
                if !path_taken[pi] {
                    path.misses += 1;
                }
                if path.misses >= params.patience {
                    done.push(path);
                } else {
                    still_live.push(path);
                }
            }
            live = still_live;

            // unmatched candidates start new paths
            for (ci, &di) in cands.iter().enumerate() {
                if cand_taken[ci] {
                    continue;
                }
                let d = &detections[di];
                let score = d.scores[class as usize];
                live.push(LivePath {
                    id: next_id,
                    endpoints: vec![(d.t, d.box_t), (d.t + delta, d.box_td)],
                    segment_scores: vec![score],
                    detection_scores: vec![score],
                    misses: 0,
                });
                next_id += 1;
            }

            if t >= t_max {
                break;
            }
            t += delta;
        }
        done.extend(live);
        done.sort_by_key(|p| p.id);
        for p in done {
            tubes.push(SparseTube {
                video_id: video_id.to_string(),
                class,
                endpoints: p.endpoints,
                segment_scores: p.segment_scores,
                detection_scores: p.detection_scores,
            });
        }
    }
    Ok(tubes)
}

/// Densifies a sparse tube by linear interpolation of box corners between
/// consecutive endpoints. Endpoint boxes are preserved exactly.
pub fn interpolate(tube: &SparseTube) -> ActionTube {
    let (start, _) = tube.endpoints[0];
    let (end, _) = *tube.endpoints.last().expect("nonempty endpoints");
    let mut boxes = Vec::with_capacity((end - start + 1) as usize);
    let mut frame_scores = Vec::with_capacity(boxes.capacity());

    for (seg, pair) in tube.endpoints.windows(2).enumerate() {
        let (t0, b0) = pair[0];
        let (t1, b1) = pair[1];
        let c0 = b0.corners();
        let c1 = b1.corners();
        let span = f64::from(t1 - t0);
        for t in t0..t1 {
            let w = f64::from(t - t0) / span;
            let c = [
                c0[0] + (c1[0] - c0[0]) * w,
                c0[1] + (c1[1] - c0[1]) * w,
                c0[2] + (c1[2] - c0[2]) * w,
                c0[3] + (c1[3] - c0[3]) * w,
            ];
            boxes.push(if t == t0 {
                b0
            } else {
                BBox::new(c[0], c[1], c[2], c[3]).expect("interpolant of valid boxes")
            });
            frame_scores.push(tube.segment_scores[seg]);
        }
    }
    let (_, last_box) = *tube.endpoints.last().expect("nonempty endpoints");
    boxes.push(last_box);
    frame_scores.push(*tube.segment_scores.last().expect("nonempty segments"));

    let score =
        tube.detection_scores.iter().sum::<f64>() / tube.detection_scores.len().max(1) as f64;
    ActionTube {
        video_id: tube.video_id.clone(),
        class: tube.class,
        start,
        end,
        boxes,
        frame_scores,
        score,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimConfig {
    /// Penalty paid whenever the action/background label changes between
    /// consecutive frames.
    pub lambda: f64,
    /// Segments whose mean frame score falls below this are dropped.
    pub score_floor: f64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        TrimConfig {
            lambda: 0.5,
            score_floor: 0.0,
        }
    }
}

/// Exact two-state DP labeling: maximizes the summed per-frame potentials
/// (`score` for action, `1 - score` for background) minus `lambda` per
/// label change. Returns the labels and the optimal objective value.
pub fn trim_labels(frame_scores: &[f64], lambda: f64) -> (Vec<bool>, f64) {
    let t_len = frame_scores.len();
    if t_len == 0 {
        return (Vec::new(), 0.0);
    }
    // dp[l]: best objective ending in label l (true = action)
    let mut dp = [1.0 - frame_scores[0], frame_scores[0]];
    let mut back: Vec<[bool; 2]> = Vec::with_capacity(t_len);
    back.push([false, true]);
    for &s in &frame_scores[1..] {
        let mut next = [0.0f64; 2];
        let mut choice = [false; 2];
        for l in 0..2 {
            let stay = dp[l];
            let switch = dp[1 - l] - lambda;
            // ties prefer staying, which keeps segments contiguous
            let (best, from) = if switch > stay {
                (switch, l == 0)
            } else {
                (stay, l == 1)
            };
            let emit = if l == 1 { s } else { 1.0 - s };
            next[l] = best + emit;
            choice[l] = from;
        }
        dp = next;
        back.push(choice);
    }
    // ties at the end prefer the action label
    let mut label = dp[1] >= dp[0];
    let objective = if label { dp[1] } else { dp[0] };
    let mut labels = vec![false; t_len];
    for t in (0..t_len).rev() {
        labels[t] = label;
        label = back[t][label as usize];
    }
    (labels, objective)
}

/// Splits a dense tube into its maximal action runs under the DP labeling.
/// May return no tubes when everything is labeled background.
pub fn trim(tube: &ActionTube, cfg: &TrimConfig) -> Vec<ActionTube> {
    let (labels, _) = trim_labels(&tube.frame_scores, cfg.lambda);
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for t in 0..=labels.len() {
        let on = t < labels.len() && labels[t];
        match (run_start, on) {
            (None, true) => run_start = Some(t),
            (Some(s), false) => {
                let frames = &tube.frame_scores[s..t];
                let mean = frames.iter().sum::<f64>() / frames.len() as f64;
                if mean >= cfg.score_floor {
                    out.push(ActionTube {
                        video_id: tube.video_id.clone(),
                        class: tube.class,
                        start: tube.start + s as u32,
                        end: tube.start + (t - 1) as u32,
                        boxes: tube.boxes[s..t].to_vec(),
                        frame_scores: frames.to_vec(),
                        score: mean,
                    });
                }
                run_start = None;
            }
            _ => {}
        }
    }
    out
}

/// Late mean fusion of appearance and flow detections.
///
/// Per timestep, pairs are greedily matched by the mean IoU of the two
/// micro-tube frames; matched pairs keep the appearance boxes with
/// elementwise-averaged scores, everything unmatched passes through
/// unchanged.
pub fn mean_fuse(
    appearance: &[Detection],
    flow: &[Detection],
    iou_gate: f64,
) -> Result<Vec<Detection>> {
    let da = validate_stream(appearance)?;
    let df = validate_stream(flow)?;
    if !appearance.is_empty() && !flow.is_empty() && da != df {
        return Err(Error::InvalidInput(format!(
            "appearance delta {da} does not match flow delta {df}"
        )));
    }

    let mut flow_by_t: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, d) in flow.iter().enumerate() {
        flow_by_t.entry(d.t).or_default().push(i);
    }

    let mut fused = Vec::new();
    let mut flow_taken = vec![false; flow.len()];
    let mut app_by_t: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, d) in appearance.iter().enumerate() {
        app_by_t.entry(d.t).or_default().push(i);
    }

    for (&t, app_ids) in &app_by_t {
        let empty = Vec::new();
        let flow_ids = flow_by_t.get(&t).unwrap_or(&empty);
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ai, &a) in app_ids.iter().enumerate() {
            for (fi, &f) in flow_ids.iter().enumerate() {
                let overlap = 0.5
                    * (iou(&appearance[a].box_t, &flow[f].box_t)
                        + iou(&appearance[a].box_td, &flow[f].box_td));
                if overlap >= iou_gate {
                    pairs.push((overlap, ai, fi));
                }
            }
        }
        pairs.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| x.1.cmp(&y.1))
                .then_with(|| x.2.cmp(&y.2))
        });
        let mut app_taken = vec![false; app_ids.len()];
        let mut local_flow_taken = vec![false; flow_ids.len()];
        for (_, ai, fi) in pairs {
            if app_taken[ai] || local_flow_taken[fi] {
                continue;
            }
            app_taken[ai] = true;
            local_flow_taken[fi] = true;
            flow_taken[flow_ids[fi]] = true;
            let a = &appearance[app_ids[ai]];
            let f = &flow[flow_ids[fi]];
            if a.scores.len() != f.scores.len() {
                return Err(Error::InvalidInput(
                    "matched detections have different class counts".into(),
                ));
            }
            fused.push(Detection {
                t,
                delta: a.delta,
                box_t: a.box_t,
                box_td: a.box_td,
                scores: a
                    .scores
                    .iter()
                    .zip(&f.scores)
                    .map(|(x, y)| 0.5 * (x + y))
                    .collect(),
                stream: StreamTag::Fused,
            });
        }
        for (ai, &a) in app_ids.iter().enumerate() {
            if !app_taken[ai] {
                fused.push(appearance[a].clone());
            }
        }
    }
    for (f, taken) in flow_taken.iter().enumerate() {
        if !taken {
            fused.push(flow[f].clone());
        }
    }
    fused.sort_by_key(|d| d.t);
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bb(c: [f64; 4]) -> BBox {
        BBox::new(c[0], c[1], c[2], c[3]).unwrap()
    }

    fn det(t: u32, delta: u32, a: [f64; 4], b: [f64; 4], class: usize, score: f64) -> Detection {
        let mut scores = vec![0.05; 3];
        scores[0] = 0.1;
        scores[class] = score;
        Detection {
            t,
            delta,
            box_t: bb(a),
            box_td: bb(b),
            scores,
            stream: StreamTag::Appearance,
        }
    }

    #[test]
    fn perfect_handoff_builds_one_tube() {
        let a = [0.1, 0.1, 0.3, 0.3];
        let b = [0.2, 0.1, 0.4, 0.3];
        let c = [0.3, 0.1, 0.5, 0.3];
        let dets = vec![det(0, 2, a, b, 1, 0.9), det(2, 2, b, c, 1, 0.9)];
        let tubes = link_online("v", &dets, &LinkParams::default()).unwrap();
        assert_eq!(tubes.len(), 1);
        let tube = &tubes[0];
        assert_eq!((tube.start, tube.end), (0, 4));
        assert_eq!(tube.len(), 5);
        assert_eq!(tube.boxes[0], bb(a));
        assert_eq!(tube.boxes[2], bb(b));
        assert_eq!(tube.boxes[4], bb(c));
        assert_abs_diff_eq!(tube.score, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn two_separated_actors_stay_separate() {
        let mut dets = Vec::new();
        for t in 0..5u32 {
            let x = 0.05 + 0.02 * f64::from(t);
            dets.push(det(
                t,
                1,
                [x, 0.1, x + 0.15, 0.3],
                [x + 0.02, 0.1, x + 0.17, 0.3],
                1,
                0.9,
            ));
            dets.push(det(
                t,
                1,
                [x, 0.7, x + 0.15, 0.9],
                [x + 0.02, 0.7, x + 0.17, 0.9],
                1,
                0.8,
            ));
        }
        let tubes = link_online("v", &dets, &LinkParams::default()).unwrap();
        assert_eq!(tubes.len(), 2);
        for tube in &tubes {
            assert_eq!((tube.start, tube.end), (0, 5));
            // no identity switch: y extent is constant within each tube
            let y0 = tube.boxes[0].y_min();
            assert!(tube.boxes.iter().all(|b| (b.y_min() - y0).abs() < 1e-9));
        }
    }

    #[test]
    fn unsorted_and_mixed_delta_rejected() {
        let a = [0.1, 0.1, 0.3, 0.3];
        let unsorted = vec![det(2, 1, a, a, 1, 0.9), det(0, 1, a, a, 1, 0.9)];
        assert!(link_online("v", &unsorted, &LinkParams::default()).is_err());
        let mixed = vec![det(0, 1, a, a, 1, 0.9), det(1, 2, a, a, 1, 0.9)];
        assert!(link_online("v", &mixed, &LinkParams::default()).is_err());
    }

    #[test]
    fn path_terminates_after_patience_misses() {
        let a = [0.1, 0.1, 0.3, 0.3];
        let far = [0.7, 0.7, 0.9, 0.9];
        let mut dets = vec![det(0, 1, a, a, 1, 0.9)];
        // steps 1..6 have only a far-away actor; the first path dies at
        // patience 3 and is not resurrected by the later detection
        for t in 1..7u32 {
            dets.push(det(t, 1, far, far, 1, 0.8));
        }
        dets.push(det(7, 1, a, a, 1, 0.85));
        let tubes = link_online("v", &dets, &LinkParams::default()).unwrap();
        assert_eq!(tubes.len(), 3);
        assert_eq!((tubes[0].start, tubes[0].end), (0, 1));
        assert_eq!((tubes[1].start, tubes[1].end), (1, 7));
        assert_eq!((tubes[2].start, tubes[2].end), (7, 8));
    }

    #[test]
    fn gap_within_patience_is_bridged_by_interpolation() {
        let a = [0.1, 0.1, 0.3, 0.3];
        let b = [0.18, 0.1, 0.38, 0.3];
        // detections at t=0 and t=3 with two missed steps in between
        let dets = vec![det(0, 1, a, a, 1, 0.9), det(3, 1, b, b, 1, 0.9)];
        let tubes = link_online("v", &dets, &LinkParams::default()).unwrap();
        assert_eq!(tubes.len(), 1);
        let tube = &tubes[0];
        assert_eq!((tube.start, tube.end), (0, 4));
        // frame 2 sits halfway between the endpoints at frames 1 and 3
        assert_abs_diff_eq!(tube.boxes[2].x_min(), 0.14, epsilon = 1e-12);
    }

    #[test]
    fn interpolate_midpoint_and_identity() {
        let sparse = SparseTube {
            video_id: "v".into(),
            class: 1,
            endpoints: vec![(0, bb([0.0, 0.0, 0.2, 0.2])), (2, bb([0.2, 0.0, 0.4, 0.2]))],
            segment_scores: vec![0.9],
            detection_scores: vec![0.9],
        };
        let dense = interpolate(&sparse);
        assert_eq!(dense.len(), 3);
        let mid = dense.boxes[1].corners();
        for (got, want) in mid.iter().zip([0.1, 0.0, 0.3, 0.2]) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-12);
        }
        assert_eq!(dense.boxes[0], sparse.endpoints[0].1);
        assert_eq!(dense.boxes[2], sparse.endpoints[1].1);

        let unit = SparseTube {
            endpoints: vec![(4, bb([0.0, 0.0, 0.2, 0.2])), (5, bb([0.1, 0.0, 0.3, 0.2]))],
            ..sparse
        };
        let dense = interpolate(&unit);
        assert_eq!(dense.len(), 2);
        assert_eq!(dense.boxes[0], unit.endpoints[0].1);
        assert_eq!(dense.boxes[1], unit.endpoints[1].1);
    }

    fn tube_with_scores(scores: &[f64]) -> ActionTube {
        ActionTube {
            video_id: "v".into(),
            class: 1,
            start: 10,
            end: 10 + scores.len() as u32 - 1,
            boxes: vec![bb([0.1, 0.1, 0.3, 0.3]); scores.len()],
            frame_scores: scores.to_vec(),
            score: scores.iter().sum::<f64>() / scores.len() as f64,
        }
    }

    #[test]
    fn trim_keeps_strong_tube_and_drops_weak_tube() {
        let cfg = TrimConfig {
            lambda: 0.1,
            score_floor: 0.0,
        };
        let strong = tube_with_scores(&[0.9; 6]);
        let kept = trim(&strong, &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!((kept[0].start, kept[0].end), (10, 15));

        let weak = tube_with_scores(&[0.1; 6]);
        assert!(trim(&weak, &cfg).is_empty());
    }

    #[test]
    fn trim_splits_on_background_dip() {
        let scores = [0.9, 0.9, 0.1, 0.1, 0.9, 0.9];
        let tube = tube_with_scores(&scores);
        let parts = trim(
            &tube,
            &TrimConfig {
                lambda: 0.0,
                score_floor: 0.0,
            },
        );
        assert_eq!(parts.len(), 2);
        assert_eq!((parts[0].start, parts[0].end), (10, 11));
        assert_eq!((parts[1].start, parts[1].end), (14, 15));
        // a large penalty forbids switching; the strong frames win 4:2
        let whole = trim(
            &tube,
            &TrimConfig {
                lambda: 2.0,
                score_floor: 0.0,
            },
        );
        assert_eq!(whole.len(), 1);
        assert_eq!((whole[0].start, whole[0].end), (10, 15));
    }

    /// Exhaustive labeling oracle for the DP.
    fn brute_force_trim(scores: &[f64], lambda: f64) -> f64 {
        let t = scores.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0..(1u32 << t) {
            let mut obj = 0.0;
            for k in 0..t {
                let on = mask >> k & 1 == 1;
                obj += if on { scores[k] } else { 1.0 - scores[k] };
                if k > 0 && on != (mask >> (k - 1) & 1 == 1) {
                    obj -= lambda;
                }
            }
            best = best.max(obj);
        }
        best
    }

    #[test]
    fn trim_dp_equals_exhaustive_search() {
        let scores = [0.9, 0.9, 0.2, 0.2, 0.9, 0.9];
        for lambda in [0.0, 0.5, 2.0] {
            let (_, dp) = trim_labels(&scores, lambda);
            assert_abs_diff_eq!(dp, brute_force_trim(&scores, lambda), epsilon = 1e-12);
        }
    }

    #[test]
    fn fusion_means_scores_and_passes_through_unmatched() {
        let a = det(0, 1, [0.1, 0.1, 0.3, 0.3], [0.1, 0.1, 0.3, 0.3], 1, 0.8);
        let mut f = a.clone();
        f.stream = StreamTag::Flow;
        f.scores = vec![0.1, 0.6, 0.4];
        let mut a1 = a.clone();
        a1.scores = vec![0.1, 0.8, 0.2];

        let fused = mean_fuse(&[a1], &[f], 0.5).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].stream, StreamTag::Fused);
        assert_abs_diff_eq!(fused[0].scores[1], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(fused[0].scores[2], 0.3, epsilon = 1e-12);

        let lone_flow = det(3, 1, [0.6, 0.6, 0.8, 0.8], [0.6, 0.6, 0.8, 0.8], 2, 0.7);
        let fused = mean_fuse(&[a.clone()], &[lone_flow.clone()], 0.5).unwrap();
        assert_eq!(fused.len(), 2);
        assert_eq!(fused[0], a);
        assert_eq!(fused[1], lone_flow);
    }

    #[test]
    fn fusion_idempotent_on_identical_sets() {
        let x = vec![
            det(0, 1, [0.1, 0.1, 0.3, 0.3], [0.12, 0.1, 0.32, 0.3], 1, 0.8),
            det(1, 1, [0.5, 0.5, 0.7, 0.7], [0.5, 0.5, 0.7, 0.7], 2, 0.6),
        ];
        let fused = mean_fuse(&x, &x, 0.5).unwrap();
        assert_eq!(fused.len(), x.len());
        for (f, orig) in fused.iter().zip(&x) {
            assert_eq!(f.box_t, orig.box_t);
            assert_eq!(f.box_td, orig.box_td);
            for (a, b) in f.scores.iter().zip(&orig.scores) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn online_causality_prefix_invariance() {
        // one actor with a noise detection; prefix linking equals full
        // linking restricted to frames <= T for paths not re-matched later
        let mut dets = Vec::new();
        for t in 0..8u32 {
            let x = 0.1 + 0.02 * f64::from(t);
            dets.push(det(t, 1, [x, 0.2, x + 0.2, 0.5], [x + 0.02, 0.2, x + 0.22, 0.5], 1, 0.9));
        }
        let cut = 4usize;
        let full = link_online_sparse("v", &dets, &LinkParams::default()).unwrap();
        let prefix = link_online_sparse("v", &dets[..cut], &LinkParams::default()).unwrap();
        assert_eq!(full.len(), 1);
        assert_eq!(prefix.len(), 1);
        let t_cut = dets[cut - 1].t;
        let full_pre: Vec<_> = full[0]
            .endpoints
            .iter()
            .filter(|(t, _)| *t <= t_cut)
            .collect();
        let prefix_pre: Vec<_> = prefix[0]
            .endpoints
            .iter()
            .filter(|(t, _)| *t <= t_cut)
            .collect();
        assert_eq!(full_pre, prefix_pre);
    }

    proptest! {
        /// DP objective equals the exhaustive max over all labelings.
        #[test]
        fn trim_matches_brute_force(
            scores in proptest::collection::vec(0.0f64..1.0, 1..12),
            lambda in 0.0f64..2.0,
        ) {
            let (labels, dp) = trim_labels(&scores, lambda);
            let brute = brute_force_trim(&scores, lambda);
            prop_assert!((dp - brute).abs() < 1e-9);
            // the returned labels must achieve the returned objective
            let mut obj = 0.0;
            for k in 0..scores.len() {
                obj += if labels[k] { scores[k] } else { 1.0 - scores[k] };
                if k > 0 && labels[k] != labels[k - 1] {
                    obj -= lambda;
                }
            }
            prop_assert!((obj - dp).abs() < 1e-9);
        }

        /// Interpolated corners match per-coordinate affine interpolation.
        #[test]
        fn interpolation_matches_affine_oracle(
            c0 in proptest::array::uniform4(0.0f64..0.5),
            c1 in proptest::array::uniform4(0.0f64..0.5),
            delta in 1u32..6,
        ) {
            let b0 = BBox::sanitized(c0[0], c0[1], c0[0] + 0.3, c0[1] + 0.3).unwrap();
            let b1 = BBox::sanitized(c1[0], c1[1], c1[0] + 0.3, c1[1] + 0.3).unwrap();
            let sparse = SparseTube {
                video_id: "v".into(),
                class: 1,
                endpoints: vec![(0, b0), (delta, b1)],
                segment_scores: vec![0.5],
                detection_scores: vec![0.5],
            };
            let dense = interpolate(&sparse);
            prop_assert_eq!(dense.len() as u32, delta + 1);
            for t in 0..=delta {
                let w = f64::from(t) / f64::from(delta);
                let expect: Vec<f64> = b0.corners().iter().zip(b1.corners())
                    .map(|(a, b)| a + (b - a) * w)
                    .collect();
                let got = dense.boxes[t as usize].corners();
                for d in 0..4 {
                    prop_assert!((got[d] - expect[d]).abs() < 1e-12);
                }
            }
        }

        /// Fused scores are the per-class arithmetic mean for matched pairs.
        #[test]
        fn fusion_mean_oracle(
            sa in proptest::collection::vec(0.0f64..1.0, 4),
            sf in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let base = det(0, 1, [0.2, 0.2, 0.5, 0.5], [0.2, 0.2, 0.5, 0.5], 1, 0.5);
            let mut a = base.clone();
            a.scores = sa.clone();
            let mut f = base;
            f.stream = StreamTag::Flow;
            f.scores = sf.clone();
            let fused = mean_fuse(&[a], &[f], 0.5).unwrap();
            prop_assert_eq!(fused.len(), 1);
            for c in 0..4 {
                prop_assert!((fused[0].scores[c] - 0.5 * (sa[c] + sf[c])).abs() < 1e-12);
            }
        }
    }
}
