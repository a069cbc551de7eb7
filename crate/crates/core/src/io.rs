//! JSONL record schemas and line-oriented readers/writers. Malformed lines
//! are reported with their line number; strict mode additionally rejects
//! records carrying unknown fields.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::proposals::HeadShape;
use crate::transmat::{MatrixMode, TransitionMatrix, TransitionSet};
use crate::tubes::{ActionTube, Detection, StreamTag};

/// One ground-truth micro-tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub t: u32,
    pub delta: u32,
    pub class: u32,
    pub box_t: BBox,
    pub box_td: BBox,
}

impl AnnotationRecord {
    pub const FIELDS: &'static [&'static str] =
        &["video_id", "t", "delta", "class", "box_t", "box_td"];
}

/// One detection micro-tube with its stream tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub t: u32,
    pub delta: u32,
    pub stream: StreamTag,
    pub boxes: [BBox; 2],
    pub scores: Vec<f64>,
}

impl DetectionRecord {
    pub const FIELDS: &'static [&'static str] =
        &["video_id", "t", "delta", "stream", "boxes", "scores"];

    pub fn to_detection(&self) -> Detection {
        Detection {
            t: self.t,
            delta: self.delta,
            box_t: self.boxes[0],
            box_td: self.boxes[1],
            scores: self.scores.clone(),
            stream: self.stream,
        }
    }

    pub fn from_detection(video_id: &str, d: &Detection) -> Self {
        DetectionRecord {
            video_id: video_id.to_string(),
            t: d.t,
            delta: d.delta,
            stream: d.stream,
            boxes: [d.box_t, d.box_td],
            scores: d.scores.clone(),
        }
    }
}

/// A tube on the wire. `frame_scores` is optional on read: when absent,
/// every frame inherits the aggregate score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeRecord {
    pub video_id: String,
    pub class: u32,
    pub start: u32,
    pub end: u32,
    pub boxes: Vec<BBox>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_scores: Option<Vec<f64>>,
}

impl TubeRecord {
    pub const FIELDS: &'static [&'static str] = &[
        "video_id",
        "class",
        "start",
        "end",
        "boxes",
        "score",
        "frame_scores",
    ];

    pub fn from_tube(t: &ActionTube) -> Self {
        TubeRecord {
            video_id: t.video_id.clone(),
            class: t.class,
            start: t.start,
            end: t.end,
            boxes: t.boxes.clone(),
            score: t.score,
            frame_scores: Some(t.frame_scores.clone()),
        }
    }

    pub fn into_tube(self) -> Result<ActionTube> {
        let n = self.boxes.len();
        if self.end < self.start || n != (self.end - self.start + 1) as usize {
            return Err(Error::InvalidInput(format!(
                "tube [{}, {}] carries {n} boxes",
                self.start, self.end
            )));
        }
        let frame_scores = match self.frame_scores {
            Some(fs) if fs.len() == n => fs,
            Some(fs) => {
                return Err(Error::InvalidInput(format!(
                    "tube has {n} boxes but {} frame scores",
                    fs.len()
                )));
            }
            None => vec![self.score; n],
        };
        Ok(ActionTube {
            video_id: self.video_id,
            class: self.class,
            start: self.start,
            end: self.end,
            boxes: self.boxes,
            frame_scores,
            score: self.score,
        })
    }
}

/// One anchor box of the dumped grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub level: usize,
    pub cell: [u32; 2],
    pub slot: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl AnchorRecord {
    pub const FIELDS: &'static [&'static str] = &["level", "cell", "slot", "box"];
}

/// Lines of a serialized transition set: one header then sparse triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransmatLine {
    Header {
        mode: MatrixMode,
        delta: u32,
        sample_count: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
        sides: Vec<u32>,
    },
    Entry {
        level: usize,
        i: u32,
        j: u32,
        value: f64,
    },
}

impl TransmatLine {
    pub const FIELDS: &'static [&'static str] = &[
        "kind",
        "mode",
        "delta",
        "sample_count",
        "threshold",
        "sides",
        "level",
        "i",
        "j",
        "value",
    ];
}

/// Proposal dump lines: micro-tube rows then one trailing summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposalLine {
    Proposal {
        level: usize,
        cell_i: u32,
        cell_j: u32,
        slot: u32,
        box_i: BBox,
        box_j: BBox,
    },
    Summary {
        proposal_count: u64,
        m_total: u64,
        head_shapes: Vec<HeadShape>,
    },
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn check_known_fields(value: &serde_json::Value, allowed: &[&str]) -> std::result::Result<(), String> {
    if let Some(map) = value.as_object() {
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(format!("unknown field `{key}`"));
            }
        }
    }
    Ok(())
}

/// Reads a JSONL file. With `strict`, any field outside `allowed` fails the
/// line. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    strict: bool,
    allowed: &[&str],
) -> Result<Vec<T>> {
    let reader = open_reader(path)?;
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if strict {
            check_known_fields(&value, allowed).map_err(malformed)?;
        }
        let record: T = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create_writer(path)?;
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::InvalidInput(format!("serialization failed: {e}")))?;
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Serializes a transition set as a header line plus sparse triplets.
pub fn write_transition_set(path: &Path, ts: &TransitionSet) -> Result<()> {
    let mode = ts
        .mode()
        .ok_or_else(|| Error::InvalidInput("transition set has no levels".into()))?;
    let mut lines = vec![TransmatLine::Header {
        mode,
        delta: ts.delta,
        sample_count: ts.sample_count,
        threshold: ts.threshold,
        sides: ts.matrices.iter().map(|m| m.side).collect(),
    }];
    for m in &ts.matrices {
        for (i, j, value) in m.iter() {
            lines.push(TransmatLine::Entry {
                level: m.level,
                i,
                j,
                value,
            });
        }
    }
    write_jsonl(path, &lines)
}

pub fn read_transition_set(path: &Path, strict: bool) -> Result<TransitionSet> {
    let lines: Vec<TransmatLine> = read_jsonl(path, strict, TransmatLine::FIELDS)?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut iter = lines.into_iter().enumerate();
    let (mode, delta, sample_count, threshold, sides) = match iter.next() {
        Some((
            _,
            TransmatLine::Header {
                mode,
                delta,
                sample_count,
                threshold,
                sides,
            },
        )) => (mode, delta, sample_count, threshold, sides),
        Some((k, _)) => return Err(malformed(k + 1, "expected header record first".into())),
        None => return Err(malformed(1, "empty transition file".into())),
    };
    let mut matrices: Vec<TransitionMatrix> = sides
        .iter()
        .enumerate()
        .map(|(p, &side)| TransitionMatrix::zero(p, side, mode))
        .collect();
    for (k, line) in iter {
        match line {
            TransmatLine::Entry { level, i, j, value } => {
                let m = matrices.get_mut(level).ok_or_else(|| {
                    malformed(k + 1, format!("level {level} outside header sides"))
                })?;
                if i >= m.cells() || j >= m.cells() {
                    return Err(malformed(
                        k + 1,
                        format!("cell ({i}, {j}) outside {}x{} grid", m.side, m.side),
                    ));
                }
                m.set(i, j, value);
            }
            TransmatLine::Header { .. } => {
                return Err(malformed(k + 1, "duplicate header record".into()));
            }
        }
    }
    Ok(TransitionSet {
        delta,
        sample_count,
        threshold,
        matrices,
    })
}
