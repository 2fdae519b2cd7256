//! Motion data types, the canonical skeleton, the motion file format and
//! resampling.
//!
//! # Motion file grammar
//!
//! A motion file is a single JSON object:
//!
//! ```text
//! {
//!   "format": "atomotion.motion",
//!   "version": 1,
//!   "fps": <positive number>,
//!   "skeleton": {
//!     "joints": [<joint name>, ...],           // J unique names
//!     "parents": [<int>, ...],                  // -1 marks the single root
//!     "body_parts": [<body part label>, ...]    // one of the six labels per joint
//!   },
//!   "frames": [                                 // F >= 2 frames
//!     [[x, y, z], ... J triples ...],           // meters, world frame, Y up
//!     ...
//!   ]
//! }
//! ```
//!
//! Coordinates are written in the shortest decimal form that parses back to
//! the identical `f64`, so save/load is bit-exact. Non-finite values have no
//! JSON number form; the loader accepts `null`, `"NaN"`, `"Infinity"` and
//! `"-Infinity"` only so that it can reject them with a precise
//! [`MotionError::NonFiniteCoordinate`].

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::AtomicTextMatrix;

pub const FORMAT_TAG: &str = "atomotion.motion";
pub const FORMAT_VERSION: u32 = 1;

/// Index of the vertical axis in joint positions.
pub const UP_AXIS: usize = 1;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("malformed header field `{field}`: {reason}")]
    MalformedHeader { field: String, reason: String },
    #[error("joint count mismatch in frame {frame}: skeleton has {expected} joints, frame has {found}")]
    JointCountMismatch {
        frame: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite coordinate in frame {frame}, joint {joint}, axis {axis}")]
    NonFiniteCoordinate {
        frame: usize,
        joint: usize,
        axis: usize,
    },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("motion needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("resampling would produce {frames} frames (need at least 2)")]
    DegenerateOutput { frames: usize },
    #[error("frame rate must be positive and finite, got {0}")]
    InvalidFps(f64),
    #[error("dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MotionError> = std::result::Result<T, E>;

/// The six body-part groups every descriptor and atomic phrase is filed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Spine,
    LeftUpperLimb,
    RightUpperLimb,
    LeftLowerLimb,
    RightLowerLimb,
    Trajectory,
}

impl BodyPart {
    pub const ALL: [BodyPart; 6] = [
        BodyPart::Spine,
        BodyPart::LeftUpperLimb,
        BodyPart::RightUpperLimb,
        BodyPart::LeftLowerLimb,
        BodyPart::RightLowerLimb,
        BodyPart::Trajectory,
    ];

    pub const COUNT: usize = 6;

    pub fn as_str(self) -> &'static str {
        match self {
            BodyPart::Spine => "spine",
            BodyPart::LeftUpperLimb => "left_upper_limb",
            BodyPart::RightUpperLimb => "right_upper_limb",
            BodyPart::LeftLowerLimb => "left_lower_limb",
            BodyPart::RightLowerLimb => "right_lower_limb",
            BodyPart::Trajectory => "trajectory",
        }
    }

    pub fn parse(s: &str) -> Option<BodyPart> {
        BodyPart::ALL.into_iter().find(|p| p.as_str() == s)
    }

    /// Position in [`BodyPart::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Joint indices of the canonical 22-joint skeleton.
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const LEFT_HIP: usize = 1;
    pub const RIGHT_HIP: usize = 2;
    pub const SPINE1: usize = 3;
    pub const LEFT_KNEE: usize = 4;
    pub const RIGHT_KNEE: usize = 5;
    pub const SPINE2: usize = 6;
    pub const LEFT_ANKLE: usize = 7;
    pub const RIGHT_ANKLE: usize = 8;
    pub const SPINE3: usize = 9;
    pub const LEFT_FOOT: usize = 10;
    pub const RIGHT_FOOT: usize = 11;
    pub const NECK: usize = 12;
    pub const LEFT_COLLAR: usize = 13;
    pub const RIGHT_COLLAR: usize = 14;
    pub const HEAD: usize = 15;
    pub const LEFT_SHOULDER: usize = 16;
    pub const RIGHT_SHOULDER: usize = 17;
    pub const LEFT_ELBOW: usize = 18;
    pub const RIGHT_ELBOW: usize = 19;
    pub const LEFT_WRIST: usize = 20;
    pub const RIGHT_WRIST: usize = 21;
    pub const COUNT: usize = 22;
}

/// Joint hierarchy plus the joint-to-body-part map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    body_parts: Vec<BodyPart>,
    root: usize,
}

impl Skeleton {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        body_parts: Vec<BodyPart>,
    ) -> Result<Self> {
        let n = joint_names.len();
        if n == 0 {
            return Err(MotionError::InvalidSkeleton("no joints".into()));
        }
        if parents.len() != n || body_parts.len() != n {
            return Err(MotionError::InvalidSkeleton(format!(
                "{} names, {} parents, {} body parts",
                n,
                parents.len(),
                body_parts.len()
            )));
        }
        for (i, name) in joint_names.iter().enumerate() {
            if name.is_empty() {
                return Err(MotionError::InvalidSkeleton(format!("joint {i} has an empty name")));
            }
            if joint_names[..i].contains(name) {
                return Err(MotionError::InvalidSkeleton(format!("duplicate joint name `{name}`")));
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(MotionError::InvalidSkeleton(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(MotionError::InvalidSkeleton(format!(
                        "joint {i} has out-of-range parent {p}"
                    )));
                }
            }
        }
        // every joint must reach the root within n hops
        for start in 0..n {
            let mut cur = start;
            let mut hops = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                hops += 1;
                if hops > n {
                    return Err(MotionError::InvalidSkeleton(format!(
                        "cycle through joint {start}"
                    )));
                }
            }
        }
        Ok(Skeleton {
            joint_names,
            parents,
            body_parts,
            root: roots[0],
        })
    }

    /// The canonical 22-joint skeleton in HumanML3D joint order.
    pub fn humanml3d() -> Self {
        use BodyPart::*;
        const NAMES: [&str; 22] = [
            "pelvis",
            "left_hip",
            "right_hip",
            "spine1",
            "left_knee",
            "right_knee",
            "spine2",
            "left_ankle",
            "right_ankle",
            "spine3",
            "left_foot",
            "right_foot",
            "neck",
            "left_collar",
            "right_collar",
            "head",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
        ];
        const PARENTS: [i64; 22] = [
            -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
        ];
        let parts = [
            Trajectory,
            LeftLowerLimb,
            RightLowerLimb,
            Spine,
            LeftLowerLimb,
            RightLowerLimb,
            Spine,
            LeftLowerLimb,
            RightLowerLimb,
            Spine,
            LeftLowerLimb,
            RightLowerLimb,
            Spine,
            LeftUpperLimb,
            RightUpperLimb,
            Spine,
            LeftUpperLimb,
            RightUpperLimb,
            LeftUpperLimb,
            RightUpperLimb,
            LeftUpperLimb,
            RightUpperLimb,
        ];
        Skeleton::new(
            NAMES.iter().map(|s| s.to_string()).collect(),
            PARENTS
                .iter()
                .map(|&p| if p < 0 { None } else { Some(p as usize) })
                .collect(),
            parts.to_vec(),
        )
        .expect("canonical skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn body_parts(&self) -> &[BodyPart] {
        &self.body_parts
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Same skeleton with joints reordered so that new joint `i` is old joint
    /// `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Skeleton> {
        let n = self.joint_count();
        let mut inverse = vec![usize::MAX; n];
        if order.len() != n {
            return Err(MotionError::InvalidSkeleton("permutation length mismatch".into()));
        }
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(MotionError::InvalidSkeleton("not a permutation".into()));
            }
            inverse[old] = new;
        }
        Skeleton::new(
            order.iter().map(|&o| self.joint_names[o].clone()).collect(),
            order
                .iter()
                .map(|&o| self.parents[o].map(|p| inverse[p]))
                .collect(),
            order.iter().map(|&o| self.body_parts[o]).collect(),
        )
    }
}

pub type Vec3 = [f64; 3];

/// F frames of J joint positions at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    fps: f64,
    skeleton: Arc<Skeleton>,
    positions: Vec<Vec3>,
    frames: usize,
}

impl MotionSequence {
    pub fn new(fps: f64, skeleton: Arc<Skeleton>, frames: Vec<Vec<Vec3>>) -> Result<Self> {
        let j = skeleton.joint_count();
        let mut positions = Vec::with_capacity(frames.len() * j);
        for (f, frame) in frames.iter().enumerate() {
            if frame.len() != j {
                return Err(MotionError::JointCountMismatch {
                    frame: f,
                    expected: j,
                    found: frame.len(),
                });
            }
            positions.extend_from_slice(frame);
        }
        Self::from_flat(fps, skeleton, positions)
    }

    /// Build from a flat frame-major `F * J` position buffer.
    pub fn from_flat(fps: f64, skeleton: Arc<Skeleton>, positions: Vec<Vec3>) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(MotionError::InvalidFps(fps));
        }
        let j = skeleton.joint_count();
        if !positions.len().is_multiple_of(j) {
            return Err(MotionError::JointCountMismatch {
                frame: positions.len() / j,
                expected: j,
                found: positions.len() % j,
            });
        }
        let frames = positions.len() / j;
        if frames < 2 {
            return Err(MotionError::TooFewFrames(frames));
        }
        for (k, p) in positions.iter().enumerate() {
            for (axis, v) in p.iter().enumerate() {
                if !v.is_finite() {
                    return Err(MotionError::NonFiniteCoordinate {
                        frame: k / j,
                        joint: k % j,
                        axis,
                    });
                }
            }
        }
        Ok(MotionSequence {
            fps,
            skeleton,
            positions,
            frames,
        })
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn skeleton(&self) -> &Arc<Skeleton> {
        &self.skeleton
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn frame(&self, i: usize) -> &[Vec3] {
        let j = self.joint_count();
        &self.positions[i * j..(i + 1) * j]
    }

    pub fn position(&self, frame: usize, joint: usize) -> Vec3 {
        self.positions[frame * self.joint_count() + joint]
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn frames(&self) -> impl Iterator<Item = &[Vec3]> {
        self.positions.chunks_exact(self.joint_count())
    }

    /// Root position relative to the first frame, per frame.
    pub fn root_trajectory(&self) -> Vec<Vec3> {
        let root = self.skeleton.root();
        let origin = self.position(0, root);
        (0..self.frames)
            .map(|f| {
                let p = self.position(f, root);
                [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]]
            })
            .collect()
    }

    /// Reorder joints: new joint `i` is old joint `order[i]`.
    pub fn permute_joints(&self, order: &[usize]) -> Result<MotionSequence> {
        let skeleton = Arc::new(self.skeleton.permuted(order)?);
        let positions = self
            .frames()
            .flat_map(|frame| order.iter().map(move |&o| frame[o]))
            .collect();
        MotionSequence::from_flat(self.fps, skeleton, positions)
    }
}

/// Linearly resample onto the uniform grid `t_k = k / target_fps`.
///
/// Output has `round(F * target_fps / fps)` frames; samples past the last
/// source frame hold the last pose.
pub fn resample(motion: &MotionSequence, target_fps: f64) -> Result<MotionSequence> {
    if !(target_fps.is_finite() && target_fps > 0.0) {
        return Err(MotionError::InvalidFps(target_fps));
    }
    if target_fps == motion.fps {
        return Ok(motion.clone());
    }
    let f = motion.frame_count();
    let out_frames = (f as f64 * target_fps / motion.fps).round() as usize;
    if out_frames < 2 {
        return Err(MotionError::DegenerateOutput { frames: out_frames });
    }
    let step = motion.fps / target_fps;
    let j = motion.joint_count();
    let last = (f - 1) as f64;
    let mut positions = Vec::with_capacity(out_frames * j);
    for k in 0..out_frames {
        let s = (k as f64 * step).min(last);
        let lo = s.floor() as usize;
        let frac = s - lo as f64;
        let a = motion.frame(lo);
        if frac == 0.0 {
            positions.extend_from_slice(a);
            continue;
        }
        let b = motion.frame(lo + 1);
        positions.extend(a.iter().zip(b).map(|(p, q)| {
            [
                p[0] + (q[0] - p[0]) * frac,
                p[1] + (q[1] - p[1]) * frac,
                p[2] + (q[2] - p[2]) * frac,
            ]
        }));
    }
    MotionSequence::from_flat(target_fps, motion.skeleton.clone(), positions)
}

/// One dataset entry: a motion with its optional captions.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub motion: MotionSequence,
    pub raw_text: Option<String>,
    pub atomic: Option<AtomicTextMatrix>,
}

impl DatasetItem {
    pub fn motion(motion: MotionSequence) -> Self {
        DatasetItem {
            motion,
            raw_text: None,
            atomic: None,
        }
    }
}

/// Non-empty collection of motions sharing one skeleton.
#[derive(Debug, Clone)]
pub struct MotionDataset {
    items: Vec<DatasetItem>,
}

impl MotionDataset {
    pub fn new(items: Vec<DatasetItem>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| MotionError::InvalidDataset("dataset is empty".into()))?;
        let skeleton = first.motion.skeleton().clone();
        for (i, item) in items.iter().enumerate().skip(1) {
            let s = item.motion.skeleton();
            if !Arc::ptr_eq(s, &skeleton) && **s != *skeleton {
                return Err(MotionError::InvalidDataset(format!(
                    "item {i} uses a different skeleton"
                )));
            }
        }
        Ok(MotionDataset { items })
    }

    pub fn from_motions(motions: Vec<MotionSequence>) -> Result<Self> {
        Self::new(motions.into_iter().map(DatasetItem::motion).collect())
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn motions(&self) -> impl Iterator<Item = &MotionSequence> {
        self.items.iter().map(|i| &i.motion)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn skeleton(&self) -> &Arc<Skeleton> {
        self.items[0].motion.skeleton()
    }
}

// ---------------------------------------------------------------------------
// file format

#[derive(Deserialize)]
struct RawSkeleton {
    joints: Vec<String>,
    parents: Vec<i64>,
    body_parts: Vec<String>,
}

#[derive(Deserialize)]
struct RawMotionFile {
    format: Option<String>,
    version: Option<u32>,
    fps: Option<f64>,
    skeleton: Option<RawSkeleton>,
    frames: Option<Vec<Vec<[Coord; 3]>>>,
}

/// A coordinate as read from disk; non-finite markers become NaN/inf so the
/// validator can name the exact frame.
struct Coord(f64);

impl<'de> Deserialize<'de> for Coord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct CoordVisitor;
        impl Visitor<'_> for CoordVisitor {
            type Value = Coord;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number, null, or a non-finite marker string")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Coord, E> {
                Ok(Coord(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Coord, E> {
                Ok(Coord(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Coord, E> {
                Ok(Coord(v as f64))
            }
            fn visit_unit<E: de::Error>(self) -> std::result::Result<Coord, E> {
                Ok(Coord(f64::NAN))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Coord, E> {
                match v {
                    "NaN" | "nan" => Ok(Coord(f64::NAN)),
                    "Infinity" | "inf" => Ok(Coord(f64::INFINITY)),
                    "-Infinity" | "-inf" => Ok(Coord(f64::NEG_INFINITY)),
                    other => Err(E::custom(format!("unexpected coordinate string `{other}`"))),
                }
            }
        }
        d.deserialize_any(CoordVisitor)
    }
}

fn header_err(field: &str, reason: impl Into<String>) -> MotionError {
    MotionError::MalformedHeader {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Parse a motion file.
pub fn load_motion<R: Read>(source: R) -> Result<MotionSequence> {
    let raw: RawMotionFile =
        serde_json::from_reader(source).map_err(|e| header_err("<document>", e.to_string()))?;
    match raw.format.as_deref() {
        Some(FORMAT_TAG) => {}
        Some(other) => return Err(header_err("format", format!("expected `{FORMAT_TAG}`, got `{other}`"))),
        None => return Err(header_err("format", "missing")),
    }
    match raw.version {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(header_err("version", format!("unsupported version {v}"))),
        None => return Err(header_err("version", "missing")),
    }
    let fps = raw.fps.ok_or_else(|| header_err("fps", "missing"))?;
    if !(fps.is_finite() && fps > 0.0) {
        return Err(header_err("fps", format!("must be positive, got {fps}")));
    }
    let sk = raw.skeleton.ok_or_else(|| header_err("skeleton", "missing"))?;
    let mut parts = Vec::with_capacity(sk.body_parts.len());
    for p in &sk.body_parts {
        parts.push(
            BodyPart::parse(p).ok_or_else(|| header_err("skeleton.body_parts", format!("unknown label `{p}`")))?,
        );
    }
    let parents = sk
        .parents
        .iter()
        .map(|&p| match p {
            -1 => Ok(None),
            p if p >= 0 => Ok(Some(p as usize)),
            p => Err(header_err("skeleton.parents", format!("invalid parent index {p}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let skeleton = Skeleton::new(sk.joints, parents, parts).map_err(|e| match e {
        MotionError::InvalidSkeleton(reason) => header_err("skeleton", reason),
        other => other,
    })?;
    let frames = raw.frames.ok_or_else(|| header_err("frames", "missing"))?;
    let frames: Vec<Vec<Vec3>> = frames
        .into_iter()
        .map(|f| f.into_iter().map(|[x, y, z]| [x.0, y.0, z.0]).collect())
        .collect();
    MotionSequence::new(fps, Arc::new(skeleton), frames)
}

fn write_f64<W: Write>(out: &mut W, v: f64) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &v).map_err(std::io::Error::other)
}

/// Serialize a motion; `load_motion` of the output reproduces it bit-exactly.
pub fn save_motion<W: Write>(motion: &MotionSequence, mut out: W) -> Result<()> {
    let sk = motion.skeleton();
    let w = &mut out;
    writeln!(w, "{{")?;
    writeln!(w, "  \"format\": \"{FORMAT_TAG}\",")?;
    writeln!(w, "  \"version\": {FORMAT_VERSION},")?;
    write!(w, "  \"fps\": ")?;
    write_f64(w, motion.fps())?;
    writeln!(w, ",")?;
    writeln!(w, "  \"skeleton\": {{")?;
    let names = serde_json::to_string(sk.joint_names()).map_err(std::io::Error::other)?;
    writeln!(w, "    \"joints\": {names},")?;
    let parents: Vec<i64> = sk
        .parents()
        .iter()
        .map(|p| p.map_or(-1, |p| p as i64))
        .collect();
    writeln!(w, "    \"parents\": {},", serde_json::to_string(&parents).map_err(std::io::Error::other)?)?;
    writeln!(
        w,
        "    \"body_parts\": {}",
        serde_json::to_string(sk.body_parts()).map_err(std::io::Error::other)?
    )?;
    writeln!(w, "  }},")?;
    writeln!(w, "  \"frames\": [")?;
    let n = motion.frame_count();
    for (i, frame) in motion.frames().enumerate() {
        write!(w, "    [")?;
        for (j, p) in frame.iter().enumerate() {
            if j > 0 {
                write!(w, ", ")?;
            }
            write!(w, "[")?;
            write_f64(w, p[0])?;
            write!(w, ", ")?;
            write_f64(w, p[1])?;
            write!(w, ", ")?;
            write_f64(w, p[2])?;
            write!(w, "]")?;
        }
        writeln!(w, "]{}", if i + 1 < n { "," } else { "" })?;
    }
    writeln!(w, "  ]")?;
    writeln!(w, "}}")?;
    Ok(())
}

/// Convenience wrapper returning the serialized bytes.
pub fn motion_to_bytes(motion: &MotionSequence) -> Vec<u8> {
    let mut buf = Vec::new();
    save_motion(motion, &mut buf).expect("writing to a Vec cannot fail");
    buf
}
