//! Skeletal data model: frames, recordings, windows, limb index sets,
//! normalization into the root-centred unit-segment frame, and the
//! time-major vector layout shared by every model input and output.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 9;
pub const FPS: f64 = 30.0;

/// Parent -> child segments of the upper-body chain, parents before children.
///
/// Joints: 0 root, 1 spine/neck, 2 head, 3 right shoulder, 4 left shoulder,
/// 5 right elbow, 6 left elbow, 7 right hand, 8 left hand.
pub const CHAIN: [(usize, usize); 8] = [
    (0, 1),
    (1, 2),
    (1, 3),
    (1, 4),
    (3, 5),
    (5, 7),
    (4, 6),
    (6, 8),
];

pub const NUM_SEGMENTS: usize = CHAIN.len();

pub const RIGHT_HAND: usize = 7;

pub type Point3 = [f64; 3];

/// One captured frame. `t` counts 30 fps ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFrame {
    pub t: u64,
    pub joints: Vec<Point3>,
}

impl JointFrame {
    pub fn new(t: u64, joints: Vec<Point3>) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::ShapeMismatch(format!(
                "frame {t} has {} joints, expected {NUM_JOINTS}",
                joints.len()
            )));
        }
        Ok(Self { t, joints })
    }

    fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub fps: f64,
    pub frames: Vec<JointFrame>,
}

impl Recording {
    /// Builds a recording, checking joint counts and strictly increasing ticks.
    pub fn new(id: impl Into<String>, frames: Vec<JointFrame>) -> Result<Self> {
        for (i, f) in frames.iter().enumerate() {
            if f.joints.len() != NUM_JOINTS {
                return Err(Error::ShapeMismatch(format!(
                    "frame {i} has {} joints, expected {NUM_JOINTS}",
                    f.joints.len()
                )));
            }
            if i > 0 && f.t <= frames[i - 1].t {
                return Err(Error::Parse(format!(
                    "frame ticks not strictly increasing at index {i}"
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            fps: FPS,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Full-skeleton window of `delta_t` frames starting at frame index `start`.
    pub fn window(&self, start: usize, delta_t: usize) -> Result<FrameWindow> {
        if start + delta_t > self.frames.len() {
            return Err(Error::RecordingTooShort {
                frames: self.frames.len(),
                needed: start + delta_t,
            });
        }
        let frames = &self.frames[start..start + delta_t];
        Ok(FrameWindow {
            start_t: frames.first().map_or(0, |f| f.t),
            n_joints: NUM_JOINTS,
            points: frames
                .iter()
                .flat_map(|f| f.joints.iter().copied())
                .collect(),
        })
    }

    /// The `delta_t` frames ending at (and including) frame index `end`.
    pub fn window_ending_at(&self, end: usize, delta_t: usize) -> Result<FrameWindow> {
        if end + 1 < delta_t {
            return Err(Error::RecordingTooShort {
                frames: end + 1,
                needed: delta_t,
            });
        }
        self.window(end + 1 - delta_t, delta_t)
    }

    /// Reads a JSON Lines recording; the id is the file stem.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_jsonl(id, std::io::BufReader::new(file))
    }

    pub fn from_jsonl(id: impl Into<String>, reader: impl BufRead) -> Result<Self> {
        let mut frames = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let frame: JointFrame = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if frame.joints.len() != NUM_JOINTS {
                return Err(Error::Parse(format!(
                    "line {}: {} joints, expected {NUM_JOINTS}",
                    lineno + 1,
                    frame.joints.len()
                )));
            }
            frames.push(frame);
        }
        Self::new(id, frames)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for f in &self.frames {
            serde_json::to_writer(&mut writer, f)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// A block of consecutive frames, stored time-major then joint.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    pub start_t: u64,
    pub n_joints: usize,
    pub points: Vec<Point3>,
}

impl FrameWindow {
    pub fn delta_t(&self) -> usize {
        self.points.len().checked_div(self.n_joints).unwrap_or(0)
    }

    pub fn frame(&self, step: usize) -> &[Point3] {
        &self.points[step * self.n_joints..(step + 1) * self.n_joints]
    }

    pub fn point(&self, step: usize, joint: usize) -> Point3 {
        self.points[step * self.n_joints + joint]
    }

    pub fn last_frame(&self) -> &[Point3] {
        self.frame(self.delta_t() - 1)
    }

    /// Flattens to the time-major, joint, coordinate layout.
    pub fn vectorize(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn devectorize(v: &[f64], delta_t: usize, n_joints: usize) -> Result<Self> {
        let expected = delta_t * n_joints * 3;
        if v.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: v.len(),
            });
        }
        Ok(Self {
            start_t: 0,
            n_joints,
            points: v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    /// Keeps only the joints of `limb`, in index-set order.
    pub fn select_limb(&self, limb: Limb) -> FrameWindow {
        let idx = limb.indices();
        let points = (0..self.delta_t())
            .flat_map(|s| idx.iter().map(move |&j| self.point(s, j)))
            .collect();
        FrameWindow {
            start_t: self.start_t,
            n_joints: idx.len(),
            points,
        }
    }
}

/// Flat index of `(step, joint, coord)` in the vector layout.
pub fn flat_index(step: usize, joint: usize, coord: usize, n_joints: usize) -> usize {
    (step * n_joints + joint) * 3 + coord
}

/// The four separately modelled body parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Limb {
    Root,
    Torso,
    Right,
    Left,
}

impl Limb {
    pub const ALL: [Limb; 4] = [Limb::Root, Limb::Torso, Limb::Right, Limb::Left];

    pub fn indices(self) -> &'static [usize] {
        match self {
            Limb::Root => &[0],
            Limb::Torso => &[1, 2, 3, 4],
            Limb::Right => &[3, 5, 7],
            Limb::Left => &[4, 6, 8],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Limb::Root => "root",
            Limb::Torso => "torso",
            Limb::Right => "right",
            Limb::Left => "left",
        }
    }

    pub fn ordinal(self) -> u64 {
        match self {
            Limb::Root => 0,
            Limb::Torso => 1,
            Limb::Right => 2,
            Limb::Left => 3,
        }
    }

    /// Vector dimension of one window for this limb.
    pub fn dim(self, delta_t: usize) -> usize {
        delta_t * self.indices().len() * 3
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

/// What is needed to map normalized frames back to sensor coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationContext {
    pub root_positions: Vec<Point3>,
    pub segment_lengths: Vec<[f64; NUM_SEGMENTS]>,
}

impl NormalizationContext {
    pub fn len(&self) -> usize {
        self.root_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.root_positions.is_empty()
    }

    /// Context with root at the origin and unit segments for `n` frames.
    pub fn identity(n: usize) -> Self {
        Self {
            root_positions: vec![[0.0; 3]; n],
            segment_lengths: vec![[1.0; NUM_SEGMENTS]; n],
        }
    }
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Root-centres every frame and rescales each chain segment to length one.
pub fn normalize(recording: &Recording) -> Result<(Recording, NormalizationContext)> {
    let mut frames = Vec::with_capacity(recording.len());
    let mut ctx = NormalizationContext {
        root_positions: Vec::with_capacity(recording.len()),
        segment_lengths: Vec::with_capacity(recording.len()),
    };
    for (i, f) in recording.frames.iter().enumerate() {
        if f.joints.len() != NUM_JOINTS {
            return Err(Error::ShapeMismatch(format!("frame {i} joint count")));
        }
        if !f.is_finite() {
            return Err(Error::NonFiniteInput { frame: i });
        }
        let mut out = vec![[0.0; 3]; NUM_JOINTS];
        let mut lengths = [0.0; NUM_SEGMENTS];
        for (s, &(p, c)) in CHAIN.iter().enumerate() {
            let d = sub(f.joints[c], f.joints[p]);
            let len = norm(d);
            if len == 0.0 {
                return Err(Error::ZeroLengthSegment {
                    frame: i,
                    parent: p,
                    child: c,
                });
            }
            lengths[s] = len;
            for k in 0..3 {
                out[c][k] = out[p][k] + d[k] / len;
            }
        }
        ctx.root_positions.push(f.joints[0]);
        ctx.segment_lengths.push(lengths);
        frames.push(JointFrame {
            t: f.t,
            joints: out,
        });
    }
    Ok((
        Recording {
            id: recording.id.clone(),
            fps: recording.fps,
            frames,
        },
        ctx,
    ))
}

/// Maps one normalized frame to sensor coordinates.
///
/// Linear in the normalized positions: each child is placed at its parent
/// plus the normalized segment vector scaled by the stored length. Segments
/// that are not exactly unit length (model predictions) are scaled as is.
pub fn denormalize_frame(
    joints: &[Point3],
    root: Point3,
    lengths: &[f64; NUM_SEGMENTS],
) -> Vec<Point3> {
    let mut out = vec![[0.0; 3]; NUM_JOINTS];
    out[0] = [
        root[0] + joints[0][0],
        root[1] + joints[0][1],
        root[2] + joints[0][2],
    ];
    for (s, &(p, c)) in CHAIN.iter().enumerate() {
        let d = sub(joints[c], joints[p]);
        for k in 0..3 {
            out[c][k] = out[p][k] + lengths[s] * d[k];
        }
    }
    out
}

pub fn denormalize(recording: &Recording, ctx: &NormalizationContext) -> Result<Recording> {
    if ctx.len() != recording.len() || ctx.segment_lengths.len() != recording.len() {
        return Err(Error::ContextMismatch(format!(
            "context has {} frames, recording has {}",
            ctx.len(),
            recording.len()
        )));
    }
    let frames = recording
        .frames
        .iter()
        .zip(ctx.root_positions.iter().zip(&ctx.segment_lengths))
        .map(|(f, (&root, lengths))| JointFrame {
            t: f.t,
            joints: denormalize_frame(&f.joints, root, lengths),
        })
        .collect();
    Ok(Recording {
        id: recording.id.clone(),
        fps: recording.fps,
        frames,
    })
}

/// Past/future window pairs, one per `t` in `[delta_t, T - delta_t)`.
///
/// The past window covers frame indices `t - delta_t + 1 ..= t`, the future
/// window `t + 1 ..= t + delta_t`.
pub fn make_pairs(
    recording: &Recording,
    delta_t: usize,
) -> Result<Vec<(FrameWindow, FrameWindow)>> {
    pair_past_starts(recording.len(), delta_t)?
        .map(|s| {
            Ok((
                recording.window(s, delta_t)?,
                recording.window(s + delta_t, delta_t)?,
            ))
        })
        .collect()
}

/// First frame index of the past window for every pair of a recording.
pub fn pair_past_starts(n_frames: usize, delta_t: usize) -> Result<std::ops::Range<usize>> {
    if delta_t == 0 {
        return Err(Error::InvalidArgument("delta_t must be at least 1".into()));
    }
    if n_frames < 2 * delta_t {
        return Err(Error::RecordingTooShort {
            frames: n_frames,
            needed: 2 * delta_t,
        });
    }
    // t in [delta_t, T - delta_t), past start = t - delta_t + 1
    Ok(1..n_frames - 2 * delta_t + 1)
}

/// Number of pairs `make_pairs` yields.
pub fn pair_count(n_frames: usize, delta_t: usize) -> usize {
    n_frames.saturating_sub(2 * delta_t)
}

/// Window span in milliseconds at the recording frame rate.
pub fn window_span_ms(delta_t: usize) -> f64 {
    delta_t as f64 * 1000.0 / FPS
}
