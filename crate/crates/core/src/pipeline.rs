//! End-to-end orchestration: annotations -> transition matrices ->
//! proposals, and detections -> (fusion) -> linking -> trimming -> metrics,
//! summarized in a deterministic machine-readable report.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{frame_map, video_map, GroundTruthTube};
use crate::geometry::{AnchorGrid, AnchorRecipe, PyramidConfig};
use crate::io::{AnnotationRecord, DetectionRecord};
use crate::proposals::{enumerate_proposals, pooling_plan};
use crate::synth::{generate, ScenarioSpec};
use crate::transmat::{binarize_set, fit_transition_set, normalize_set, offdiagonal_mass, MicroTube, TransitionSet};
use crate::tubes::{link_online, mean_fuse, trim, ActionTube, LinkParams, StreamTag, TrimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pyramid: PyramidConfig,
    pub recipe: AnchorRecipe,
    pub delta: u32,
    /// Binarization threshold on normalized transition probabilities.
    pub threshold: f64,
    /// Foreground class count C.
    pub classes: u32,
    pub link: LinkParams,
    pub trim: TrimConfig,
    pub fusion_gate: f64,
    pub fuse_streams: bool,
    pub eval_iou: f64,
}

impl PipelineConfig {
    pub fn with_pyramid(pyramid: PyramidConfig, classes: u32) -> Self {
        PipelineConfig {
            pyramid,
            recipe: AnchorRecipe::default(),
            delta: 1,
            threshold: 0.1,
            classes,
            link: LinkParams::default(),
            trim: TrimConfig::default(),
            fusion_gate: 0.5,
            fuse_streams: true,
            eval_iou: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.delta == 0 {
            return Err(Error::InvalidInput("delta must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.classes == 0 {
            return Err(Error::InvalidInput("class count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_iou) || !(0.0..=1.0).contains(&self.fusion_gate) {
            return Err(Error::InvalidInput(
                "eval iou and fusion gate must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineInputs {
    pub annotations: Vec<AnnotationRecord>,
    pub detections: Vec<DetectionRecord>,
    pub ground_truth: Vec<GroundTruthTube>,
}

impl PipelineInputs {
    pub fn from_scenario(spec: &ScenarioSpec) -> Result<Self> {
        let out = generate(spec)?;
        Ok(PipelineInputs {
            annotations: out.annotations,
            detections: out.detections,
            ground_truth: out.ground_truth,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub side: u32,
    pub populated_rows: u64,
    pub offdiag_nonzero: u64,
    pub offdiag_mass: f64,
    /// Ones surviving the binarization threshold.
    pub cardinality: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub micro_tubes: u64,
    pub levels: Vec<LevelStats>,
    pub m_total: u64,
    pub proposal_count: u64,
    pub detections_in: u64,
    pub linked_detections: u64,
    pub tubes_linked: u64,
    pub tubes_final: u64,
    pub frame_map: f64,
    pub video_map: f64,
    pub video_ap_per_class: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub tubes: Vec<ActionTube>,
    pub binary: TransitionSet,
}

fn detections_for_video(
    cfg: &PipelineConfig,
    records: &[DetectionRecord],
) -> Result<Vec<crate::tubes::Detection>> {
    let mut app = Vec::new();
    let mut flow = Vec::new();
    let mut fused = Vec::new();
    for r in records {
        match r.stream {
            StreamTag::Appearance => app.push(r.to_detection()),
            StreamTag::Flow => flow.push(r.to_detection()),
            StreamTag::Fused => fused.push(r.to_detection()),
        }
    }
    if !fused.is_empty() {
        return Ok(fused);
    }
    if cfg.fuse_streams && !app.is_empty() && !flow.is_empty() {
        return mean_fuse(&app, &flow, cfg.fusion_gate);
    }
    if !app.is_empty() {
        Ok(app)
    } else {
        Ok(flow)
    }
}

/// Runs every stage and returns the report together with the final tubes.
pub fn run_pipeline(cfg: &PipelineConfig, inputs: &PipelineInputs) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let grid = AnchorGrid::build(&cfg.pyramid, &cfg.recipe)?;

    // transition matrices from the annotations at the configured delta
    let micro: Vec<MicroTube> = inputs
        .annotations
        .iter()
        .filter(|a| a.delta == cfg.delta)
        .map(|a| MicroTube::new(a.box_t, a.box_td, a.delta))
        .collect::<Result<Vec<_>>>()?;
    let counts = fit_transition_set(&micro, &grid)?;
    let normalized = normalize_set(&counts)?;
    let binary = binarize_set(&normalized, cfg.threshold)?;

    let levels: Vec<LevelStats> = normalized
        .matrices
        .iter()
        .zip(&binary.matrices)
        .map(|(n, b)| {
            let (mass, nonzero) = offdiagonal_mass(n);
            LevelStats {
                level: n.level,
                side: n.side,
                populated_rows: n.populated_rows().len() as u64,
                offdiag_nonzero: nonzero,
                offdiag_mass: mass,
                cardinality: b.cardinality(),
            }
        })
        .collect();

    let props = enumerate_proposals(&binary, &grid)?;
    let plan = pooling_plan(&binary, &cfg.pyramid, cfg.classes)?;

    // detections grouped per video, validated against the class count
    let expected_scores = cfg.classes as usize + 1;
    for (k, d) in inputs.detections.iter().enumerate() {
        if d.scores.len() != expected_scores {
            return Err(Error::InvalidInput(format!(
                "detection record {k}: expected {expected_scores} scores, got {}",
                d.scores.len()
            )));
        }
    }
    let mut per_video: BTreeMap<&str, Vec<DetectionRecord>> = BTreeMap::new();
    for d in &inputs.detections {
        per_video.entry(&d.video_id).or_default().push(d.clone());
    }

    let videos: Vec<(&str, Vec<DetectionRecord>)> = per_video.into_iter().collect();
    let results: Vec<Result<(u64, Vec<ActionTube>, Vec<ActionTube>)>> = videos
        .par_iter()
        .map(|(vid, records)| {
            let mut dets = detections_for_video(cfg, records)?;
            dets.sort_by_key(|d| d.t);
            let linked = link_online(vid, &dets, &cfg.link)?;
            let trimmed: Vec<ActionTube> =
                linked.iter().flat_map(|t| trim(t, &cfg.trim)).collect();
            Ok((dets.len() as u64, linked, trimmed))
        })
        .collect();

    let mut linked_detections = 0u64;
    let mut tubes_linked = 0u64;
    let mut final_tubes: Vec<ActionTube> = Vec::new();
    for r in results {
        let (n, linked, trimmed) = r?;
        linked_detections += n;
        tubes_linked += linked.len() as u64;
        final_tubes.extend(trimmed);
    }

    let frame = frame_map(&final_tubes, &inputs.ground_truth, cfg.eval_iou);
    let video = video_map(&final_tubes, &inputs.ground_truth, cfg.eval_iou);

    let report = PipelineReport {
        config: cfg.clone(),
        micro_tubes: counts.sample_count,
        levels,
        m_total: plan.m_total,
        proposal_count: props.len() as u64,
        detections_in: inputs.detections.len() as u64,
        linked_detections,
        tubes_linked,
        tubes_final: final_tubes.len() as u64,
        frame_map: frame.map,
        video_map: video.map,
        video_ap_per_class: video.per_class,
    };
    Ok(PipelineOutcome {
        report,
        tubes: final_tubes,
        binary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{ActorSpec, Motion, NoiseModel};

    fn scenario() -> ScenarioSpec {
        ScenarioSpec {
            video_id: "v0".into(),
            seed: 9,
            frames: 24,
            deltas: vec![1],
            classes: 2,
            actors: vec![
                ActorSpec {
                    class: 1,
                    size: [0.15, 0.15],
                    motion: Motion::ConstantVelocity {
                        start: [0.2, 0.25],
                        velocity: [0.015, 0.0],
                    },
                },
                ActorSpec {
                    class: 2,
                    size: [0.18, 0.18],
                    motion: Motion::Static { center: [0.7, 0.7] },
                },
            ],
            noise: NoiseModel::default(),
        }
    }

    fn small_config() -> PipelineConfig {
        PipelineConfig::with_pyramid(PyramidConfig::single_level(5, 4, 64), 2)
    }

    #[test]
    fn zero_noise_end_to_end_is_perfect() {
        let inputs = PipelineInputs::from_scenario(&scenario()).unwrap();
        let outcome = run_pipeline(&small_config(), &inputs).unwrap();
        let r = &outcome.report;
        assert_eq!(r.video_map, 1.0);
        assert_eq!(r.frame_map, 1.0);
        assert_eq!(r.micro_tubes, 46); // 23 steps x 2 actors
        assert_eq!(r.tubes_final, 2);
        assert!(r.m_total > 0);
        assert_eq!(
            r.proposal_count,
            outcome
                .binary
                .cardinalities()
                .iter()
                .map(|c| c * 4)
                .sum::<u64>()
        );
    }

    #[test]
    fn report_is_byte_deterministic() {
        let inputs = PipelineInputs::from_scenario(&scenario()).unwrap();
        let a = run_pipeline(&small_config(), &inputs).unwrap();
        let b = run_pipeline(&small_config(), &inputs).unwrap();
        let ja = serde_json::to_string_pretty(&a.report).unwrap();
        let jb = serde_json::to_string_pretty(&b.report).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn bad_config_rejected() {
        let mut cfg = small_config();
        cfg.threshold = 0.0;
        let inputs = PipelineInputs::default();
        assert!(run_pipeline(&cfg, &inputs).is_err());

        let mut cfg = small_config();
        cfg.delta = 0;
        assert!(run_pipeline(&cfg, &inputs).is_err());
    }

    #[test]
    fn score_length_mismatch_rejected() {
        let mut inputs = PipelineInputs::from_scenario(&scenario()).unwrap();
        inputs.detections[0].scores.push(0.5);
        assert!(run_pipeline(&small_config(), &inputs).is_err());
    }
}
