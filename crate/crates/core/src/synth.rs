//! Deterministic synthetic scenarios: ground-truth tubes, micro-tube
//! annotations per delta and noisy two-stream detections, so every pipeline
//! stage can be exercised without real video data.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruthTube;
use crate::geometry::BBox;
use crate::io::{AnnotationRecord, DetectionRecord};
use crate::tubes::StreamTag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub frame: u32,
    pub center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static { center: [f64; 2] },
    ConstantVelocity { start: [f64; 2], velocity: [f64; 2] },
    Piecewise { waypoints: Vec<Waypoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSpec {
    pub class: u32,
    /// Box width and height; must fit inside the unit frame.
    pub size: [f64; 2],
    pub motion: Motion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseModel {
    /// Additive Gaussian sigma on each box corner.
    #[serde(default)]
    pub box_sigma: f64,
    /// Additive Gaussian sigma on each class score.
    #[serde(default)]
    pub score_sigma: f64,
    /// Probability of dropping a whole detection micro-tube.
    #[serde(default)]
    pub miss_rate: f64,
    /// Per-step probability of an unrelated false-positive micro-tube.
    #[serde(default)]
    pub false_positive_rate: f64,
}

fn default_video_id() -> String {
    "synth-0".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default = "default_video_id")]
    pub video_id: String,
    pub seed: u64,
    /// Video length in frames.
    pub frames: u32,
    /// Deltas to slice annotations at; detections use the first entry.
    pub deltas: Vec<u32>,
    /// Foreground class count C; scores are length C + 1.
    pub classes: u32,
    pub actors: Vec<ActorSpec>,
    #[serde(default)]
    pub noise: NoiseModel,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidInput("scenario needs at least 2 frames".into()));
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(
                "deltas must be nonempty and positive".into(),
            ));
        }
        if self.classes == 0 {
            return Err(Error::InvalidInput("class count must be >= 1".into()));
        }
        for (k, a) in self.actors.iter().enumerate() {
            if !(a.size[0] > 0.0 && a.size[1] > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "actor {k}: size must be positive"
                )));
            }
            if a.size[0] > 1.0 || a.size[1] > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "actor {k} is larger than the frame"
                )));
            }
            if a.class == 0 || a.class > self.classes {
                return Err(Error::InvalidInput(format!(
                    "actor {k}: class {} outside 1..={}",
                    a.class, self.classes
                )));
            }
            if let Motion::Piecewise { waypoints } = &a.motion {
                if waypoints.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "actor {k}: piecewise motion needs waypoints"
                    )));
                }
                for w in waypoints.windows(2) {
                    if w[1].frame <= w[0].frame {
                        return Err(Error::InvalidInput(format!(
                            "actor {k}: waypoint frames must increase"
                        )));
                    }
                }
            }
        }
        for rate in [self.noise.miss_rate, self.noise.false_positive_rate] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidInput(format!(
                    "rates must be in [0, 1), got {rate}"
                )));
            }
        }
        if self.noise.box_sigma < 0.0 || self.noise.score_sigma < 0.0 {
            return Err(Error::InvalidInput("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub ground_truth: Vec<GroundTruthTube>,
    /// Exact micro-tube slices of the tubes, at every requested delta.
    pub annotations: Vec<AnnotationRecord>,
    /// Appearance and flow detections at the first delta, in time order.
    pub detections: Vec<DetectionRecord>,
}

fn center_at(motion: &Motion, t: u32) -> [f64; 2] {
    match motion {
        Motion::Static { center } => *center,
        Motion::ConstantVelocity { start, velocity } => [
            start[0] + velocity[0] * f64::from(t),
            start[1] + velocity[1] * f64::from(t),
        ],
        Motion::Piecewise { waypoints } => {
            let first = waypoints.first().expect("validated nonempty");
            let last = waypoints.last().expect("validated nonempty");
            if t <= first.frame {
                return first.center;
            }
            if t >= last.frame {
                return last.center;
            }
            for w in waypoints.windows(2) {
                if t >= w[0].frame && t <= w[1].frame {
                    let u = f64::from(t - w[0].frame) / f64::from(w[1].frame - w[0].frame);
                    return [
                        w[0].center[0] + (w[1].center[0] - w[0].center[0]) * u,
                        w[0].center[1] + (w[1].center[1] - w[0].center[1]) * u,
                    ];
                }
            }
            last.center
        }
    }
}

fn actor_box(actor: &ActorSpec, t: u32) -> BBox {
    let c = center_at(&actor.motion, t);
    BBox::centered(c[0], c[1], actor.size[0], actor.size[1])
        .expect("actor boxes are valid after clamping")
}

struct NoiseRng {
    rng: ChaCha8Rng,
    corner: Normal<f64>,
    score: Normal<f64>,
}

impl NoiseRng {
    fn new(seed: u64, stream: u64, noise: &NoiseModel) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseRng {
            rng,
            corner: Normal::new(0.0, noise.box_sigma).expect("validated sigma"),
            score: Normal::new(0.0, noise.score_sigma).expect("validated sigma"),
        }
    }

    fn jitter_box(&mut self, b: &BBox) -> BBox {
        let c = b.corners();
        let j: Vec<f64> = (0..4).map(|_| self.corner.sample(&mut self.rng)).collect();
        BBox::sanitized(c[0] + j[0], c[1] + j[1], c[2] + j[2], c[3] + j[3])
            .expect("sanitized jittered box is valid")
    }

    fn scores(&mut self, classes: u32, hit_class: u32) -> Vec<f64> {
        let mut s = vec![0.05; classes as usize + 1];
        s[0] = 0.1;
        s[hit_class as usize] = 0.9;
        for v in s.iter_mut() {
            *v = (*v + self.score.sample(&mut self.rng)).clamp(0.0, 1.0);
        }
        s
    }

    fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

/// Generates the scenario. Identical specs produce byte-identical outputs;
/// the flow stream uses an RNG stream independent of appearance.
pub fn generate(spec: &ScenarioSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let last_frame = spec.frames - 1;

    let ground_truth: Vec<GroundTruthTube> = spec
        .actors
        .iter()
        .map(|a| GroundTruthTube {
            video_id: spec.video_id.clone(),
            class: a.class,
            start: 0,
            boxes: (0..spec.frames).map(|t| actor_box(a, t)).collect(),
        })
        .collect();

    let mut annotations = Vec::new();
    for &delta in &spec.deltas {
        let mut t = 0;
        while t + delta <= last_frame {
            for (a, tube) in spec.actors.iter().zip(&ground_truth) {
                annotations.push(AnnotationRecord {
                    video_id: spec.video_id.clone(),
                    t,
                    delta,
                    class: a.class,
                    box_t: tube.boxes[t as usize],
                    box_td: tube.boxes[(t + delta) as usize],
                });
            }
            t += delta;
        }
    }

    let detection_delta = spec.deltas[0];
    let mut detections = Vec::new();
    for (stream_id, stream) in [(0u64, StreamTag::Appearance), (1u64, StreamTag::Flow)] {
        let mut noise = NoiseRng::new(spec.seed, stream_id, &spec.noise);
        let mut t = 0;
        while t + detection_delta <= last_frame {
            for (a, tube) in spec.actors.iter().zip(&ground_truth) {
                let missed = noise.uniform() < spec.noise.miss_rate;
                let box_t = noise.jitter_box(&tube.boxes[t as usize]);
                let box_td = noise.jitter_box(&tube.boxes[(t + detection_delta) as usize]);
                let scores = noise.scores(spec.classes, a.class);
                if missed {
                    continue;
                }
                detections.push(DetectionRecord {
                    video_id: spec.video_id.clone(),
                    t,
                    delta: detection_delta,
                    stream,
                    boxes: [box_t, box_td],
                    scores,
                });
            }
            if noise.uniform() < spec.noise.false_positive_rate {
                let cx = 0.1 + 0.8 * noise.uniform();
                let cy = 0.1 + 0.8 * noise.uniform();
                let w = 0.05 + 0.25 * noise.uniform();
                let h = 0.05 + 0.25 * noise.uniform();
                let class = 1 + (noise.uniform() * f64::from(spec.classes)) as u32;
                let class = class.min(spec.classes);
                let mut scores = vec![0.05; spec.classes as usize + 1];
                scores[0] = 0.3;
                scores[class as usize] = 0.5 + 0.1 * noise.uniform();
                let b = BBox::centered(cx, cy, w, h)?;
                detections.push(DetectionRecord {
                    video_id: spec.video_id.clone(),
                    t,
                    delta: detection_delta,
                    stream,
                    boxes: [b, b],
                    scores,
                });
            }
            t += detection_delta;
        }
    }
    detections.sort_by_key(|d| d.t);

    Ok(SynthOutput {
        ground_truth,
        annotations,
        detections,
    })
}
