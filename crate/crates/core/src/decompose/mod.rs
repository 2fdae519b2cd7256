//! Fine-grained description conversion: per-frame pose descriptors, sign-run
//! aggregation into clips, binning into periods, and threshold-based phrases.

mod calibrate;
mod convert;
mod descriptors;
mod runs;

pub use calibrate::{calibrate_thresholds, percentile, PooledStats, MIN_CLIPS_PER_KIND};
pub use convert::{convert_description, ConversionThresholds, KindThresholds, HOLDING_STILL, STATIONARY};
pub use descriptors::{
    angle_descriptor, default_descriptors, pose_descriptors, DescriptorDef, DescriptorKind, DescriptorTrack,
    DEGENERATE_NORM,
};
pub use runs::{aggregate_runs, bin_clips, bin_index, ClipDescriptor};

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::exec::Execution;
use crate::motion::{BodyPart, MotionSequence};

/// Default number of periods.
pub const DEFAULT_PERIODS: usize = 4;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("degenerate joints for descriptor `{descriptor}`{}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    DegenerateJoints { descriptor: String, frame: Option<usize> },
    #[error("invalid descriptor `{id}`: {reason}")]
    InvalidDescriptor { id: String, reason: String },
    #[error("invalid {kind} thresholds: {reason}")]
    InvalidThresholds { kind: &'static str, reason: String },
    #[error("insufficient data for {kind}: {clips} clips (need at least 10)")]
    InsufficientData { kind: &'static str, clips: usize },
    #[error("period count must be at least 1")]
    InvalidPeriods,
}

/// One phrase in a period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionEntry {
    pub descriptor: String,
    pub body_part: BodyPart,
    pub phrase: String,
    #[serde(flatten)]
    pub clip: ClipDescriptor,
}

/// Phrases grouped into `P` periods by clip start frame.
///
/// Serializes as an object keyed `"0"` .. `"P-1"` in period order; empty
/// periods are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct FineGrainedDescription {
    pub periods: Vec<Vec<DescriptionEntry>>,
}

impl FineGrainedDescription {
    pub fn period_count(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.iter().all(Vec::is_empty)
    }

    /// Entries of one period grouped by body part, in [`BodyPart::ALL`] order.
    pub fn by_body_part(&self, period: usize) -> Vec<(BodyPart, Vec<&DescriptionEntry>)> {
        BodyPart::ALL
            .iter()
            .map(|&part| {
                (
                    part,
                    self.periods[period].iter().filter(|e| e.body_part == part).collect(),
                )
            })
            .collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("description serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

impl Serialize for FineGrainedDescription {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.periods.len()))?;
        for (i, p) in self.periods.iter().enumerate() {
            map.serialize_entry(&i.to_string(), p)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for FineGrainedDescription {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw: BTreeMap<String, Vec<DescriptionEntry>> = BTreeMap::deserialize(d)?;
        let mut indexed: Vec<(usize, Vec<DescriptionEntry>)> = raw
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|i| (i, v))
                    .map_err(|_| D::Error::custom(format!("period key `{k}` is not an index")))
            })
            .collect::<Result<_, _>>()?;
        indexed.sort_by_key(|(i, _)| *i);
        for (expect, (i, _)) in indexed.iter().enumerate() {
            if *i != expect {
                return Err(D::Error::custom(format!("period keys not contiguous at {expect}")));
            }
        }
        Ok(FineGrainedDescription {
            periods: indexed.into_iter().map(|(_, v)| v).collect(),
        })
    }
}

/// Full conversion pipeline for one motion.
pub fn decompose(
    motion: &MotionSequence,
    defs: &[DescriptorDef],
    thresholds: &ConversionThresholds,
    periods: usize,
) -> Result<FineGrainedDescription, DecomposeError> {
    if periods == 0 {
        return Err(DecomposeError::InvalidPeriods);
    }
    thresholds.validate()?;
    let frames = motion.frame_count();
    let mut out = vec![Vec::new(); periods];
    for track in pose_descriptors(motion, defs)? {
        let t = thresholds.get(track.def.kind);
        for clip in aggregate_runs(&track.values, t.deadband) {
            out[bin_index(clip.start, frames, periods)].push(DescriptionEntry {
                descriptor: track.def.id.clone(),
                body_part: track.def.body_part,
                phrase: convert_description(&clip, track.def.kind, t),
                clip,
            });
        }
    }
    Ok(FineGrainedDescription { periods: out })
}

/// [`decompose`] over many motions; output order follows input order.
pub fn decompose_batch(
    motions: &[MotionSequence],
    defs: &[DescriptorDef],
    thresholds: &ConversionThresholds,
    periods: usize,
    exec: Execution,
) -> Result<Vec<FineGrainedDescription>, DecomposeError> {
    exec.try_map(motions, |m| decompose(m, defs, thresholds, periods))
}
