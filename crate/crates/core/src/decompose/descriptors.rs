//! Per-frame pose descriptors.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::DecomposeError;
use crate::motion::{BodyPart, MotionSequence, Skeleton, Vec3, UP_AXIS};

/// Norm below which a joint difference vector counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    /// Cosine of the angle at the middle joint, in [-1, 1].
    Angle,
    /// Euclidean distance between two joints, meters.
    Distance,
    /// Vertical offset of a joint above the root, meters.
    Height,
    /// Horizontal distance of a joint from its first-frame position, meters.
    Displacement,
    /// Unwrapped facing yaw of the axis between two joints, radians.
    Orientation,
}

impl DescriptorKind {
    pub const ALL: [DescriptorKind; 5] = [
        DescriptorKind::Angle,
        DescriptorKind::Distance,
        DescriptorKind::Height,
        DescriptorKind::Displacement,
        DescriptorKind::Orientation,
    ];

    pub fn arity(self) -> usize {
        match self {
            DescriptorKind::Angle => 3,
            DescriptorKind::Distance | DescriptorKind::Orientation => 2,
            DescriptorKind::Height | DescriptorKind::Displacement => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DescriptorKind::Angle => "angle",
            DescriptorKind::Distance => "distance",
            DescriptorKind::Height => "height",
            DescriptorKind::Displacement => "displacement",
            DescriptorKind::Orientation => "orientation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorDef {
    pub id: String,
    pub kind: DescriptorKind,
    pub joints: Vec<usize>,
    pub body_part: BodyPart,
}

impl DescriptorDef {
    pub fn new(id: impl Into<String>, kind: DescriptorKind, joints: Vec<usize>, body_part: BodyPart) -> Self {
        DescriptorDef {
            id: id.into(),
            kind,
            joints,
            body_part,
        }
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<(), DecomposeError> {
        if self.joints.len() != self.kind.arity() {
            return Err(DecomposeError::InvalidDescriptor {
                id: self.id.clone(),
                reason: format!(
                    "{} takes {} joints, got {}",
                    self.kind.as_str(),
                    self.kind.arity(),
                    self.joints.len()
                ),
            });
        }
        if let Some(&j) = self.joints.iter().find(|&&j| j >= skeleton.joint_count()) {
            return Err(DecomposeError::InvalidDescriptor {
                id: self.id.clone(),
                reason: format!("joint {j} not in skeleton"),
            });
        }
        Ok(())
    }
}

/// The default descriptor set, resolved by joint name against `skeleton`.
///
/// Every body part gets at least one descriptor; the trajectory part uses
/// root displacement and facing orientation.
pub fn default_descriptors(skeleton: &Skeleton) -> Result<Vec<DescriptorDef>, DecomposeError> {
    use BodyPart::*;
    use DescriptorKind::*;
    let table: [(&str, DescriptorKind, &[&str], BodyPart); 13] = [
        ("left_elbow_angle", Angle, &["left_shoulder", "left_elbow", "left_wrist"], LeftUpperLimb),
        ("right_elbow_angle", Angle, &["right_shoulder", "right_elbow", "right_wrist"], RightUpperLimb),
        ("left_knee_angle", Angle, &["left_hip", "left_knee", "left_ankle"], LeftLowerLimb),
        ("right_knee_angle", Angle, &["right_hip", "right_knee", "right_ankle"], RightLowerLimb),
        ("spine_bend_angle", Angle, &["pelvis", "spine2", "neck"], Spine),
        ("left_wrist_height", Height, &["left_wrist"], LeftUpperLimb),
        ("right_wrist_height", Height, &["right_wrist"], RightUpperLimb),
        ("left_ankle_height", Height, &["left_ankle"], LeftLowerLimb),
        ("right_ankle_height", Height, &["right_ankle"], RightLowerLimb),
        ("wrist_distance", Distance, &["left_wrist", "right_wrist"], LeftUpperLimb),
        ("ankle_distance", Distance, &["left_ankle", "right_ankle"], LeftLowerLimb),
        ("root_displacement", Displacement, &["pelvis"], Trajectory),
        ("root_orientation", Orientation, &["left_hip", "right_hip"], Trajectory),
    ];
    table
        .iter()
        .map(|(id, kind, names, part)| {
            let joints = names
                .iter()
                .map(|n| {
                    skeleton.joint_index(n).ok_or_else(|| DecomposeError::InvalidDescriptor {
                        id: id.to_string(),
                        reason: format!("skeleton has no joint `{n}`"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(DescriptorDef::new(*id, *kind, joints, *part))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorTrack {
    pub def: DescriptorDef,
    pub values: Vec<f64>,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Normalized inner product of `a - b` and `c - b`.
///
/// Straight limb gives -1, a right angle 0, a fully folded limb +1.
pub fn angle_descriptor(a: Vec3, b: Vec3, c: Vec3) -> Result<f64, DecomposeError> {
    let u = sub(a, b);
    let v = sub(c, b);
    let nu = norm(u);
    let nv = norm(v);
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        return Err(DecomposeError::DegenerateJoints {
            descriptor: String::new(),
            frame: None,
        });
    }
    let dot = (u[0] / nu) * (v[0] / nv) + (u[1] / nu) * (v[1] / nv) + (u[2] / nu) * (v[2] / nv);
    Ok(dot.clamp(-1.0, 1.0))
}

fn horizontal(v: Vec3) -> (f64, f64) {
    match UP_AXIS {
        0 => (v[1], v[2]),
        1 => (v[0], v[2]),
        _ => (v[0], v[1]),
    }
}

/// Facing yaw of the left-to-right axis, measured from +Z towards +X
/// (positive is a turn to the subject's left).
fn facing_yaw(left: Vec3, right: Vec3) -> Option<f64> {
    let (ax, az) = horizontal(sub(right, left));
    if (ax * ax + az * az).sqrt() < DEGENERATE_NORM {
        return None;
    }
    // facing = up x axis = (az, 0, -ax)
    Some(az.atan2(-ax))
}

fn unwrap_angles(values: &mut [f64]) {
    for i in 1..values.len() {
        let mut d = values[i] - values[i - 1];
        while d > PI {
            d -= 2.0 * PI;
        }
        while d < -PI {
            d += 2.0 * PI;
        }
        values[i] = values[i - 1] + d;
    }
}

/// One track per definition, evaluated frame by frame.
pub fn pose_descriptors(
    motion: &MotionSequence,
    defs: &[DescriptorDef],
) -> Result<Vec<DescriptorTrack>, DecomposeError> {
    let skeleton = motion.skeleton();
    let root = skeleton.root();
    defs.iter()
        .map(|def| {
            def.validate(skeleton)?;
            let j = &def.joints;
            let frames = motion.frame_count();
            let degenerate = |frame| DecomposeError::DegenerateJoints {
                descriptor: def.id.clone(),
                frame: Some(frame),
            };
            let mut values = Vec::with_capacity(frames);
            match def.kind {
                DescriptorKind::Angle => {
                    for f in 0..frames {
                        let v = angle_descriptor(
                            motion.position(f, j[0]),
                            motion.position(f, j[1]),
                            motion.position(f, j[2]),
                        )
                        .map_err(|_| degenerate(f))?;
                        values.push(v);
                    }
                }
                DescriptorKind::Distance => {
                    for f in 0..frames {
                        values.push(norm(sub(motion.position(f, j[0]), motion.position(f, j[1]))));
                    }
                }
                DescriptorKind::Height => {
                    for f in 0..frames {
                        values.push(motion.position(f, j[0])[UP_AXIS] - motion.position(f, root)[UP_AXIS]);
                    }
                }
                DescriptorKind::Displacement => {
                    let origin = motion.position(0, j[0]);
                    for f in 0..frames {
                        let (dx, dz) = horizontal(sub(motion.position(f, j[0]), origin));
                        values.push((dx * dx + dz * dz).sqrt());
                    }
                }
                DescriptorKind::Orientation => {
                    for f in 0..frames {
                        let yaw = facing_yaw(motion.position(f, j[0]), motion.position(f, j[1]))
                            .ok_or_else(|| degenerate(f))?;
                        values.push(yaw);
                    }
                    unwrap_angles(&mut values);
                }
            }
            Ok(DescriptorTrack {
                def: def.clone(),
                values,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{self, Action, Side};
    use proptest::prelude::*;

    #[test]
    fn eq1_reference_triples() {
        let o = [0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        assert_eq!(angle_descriptor(o, b, [2.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(angle_descriptor(o, b, [1.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(angle_descriptor(o, b, [0.5, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn coincident_joints_are_degenerate() {
        let p = [0.3, 0.2, 0.1];
        assert!(matches!(
            angle_descriptor(p, p, [1.0, 0.0, 0.0]),
            Err(DecomposeError::DegenerateJoints { .. })
        ));
    }

    #[test]
    fn default_set_covers_every_part() {
        let sk = Skeleton::humanml3d();
        let defs = default_descriptors(&sk).unwrap();
        assert_eq!(defs.len(), 13);
        for part in BodyPart::ALL {
            assert!(defs.iter().any(|d| d.body_part == part), "{part}");
        }
        for d in &defs {
            d.validate(&sk).unwrap();
        }
    }

    #[test]
    fn arity_is_checked() {
        let sk = Skeleton::humanml3d();
        let bad = DescriptorDef::new("x", DescriptorKind::Angle, vec![0, 1], BodyPart::Spine);
        assert!(bad.validate(&sk).is_err());
        let out_of_range = DescriptorDef::new("y", DescriptorKind::Height, vec![40], BodyPart::Spine);
        assert!(out_of_range.validate(&sk).is_err());
    }

    #[test]
    fn constant_motion_gives_constant_tracks() {
        let m = synthetic::still_motion(12, 20.0);
        let defs = default_descriptors(m.skeleton()).unwrap();
        for t in pose_descriptors(&m, &defs).unwrap() {
            assert!(t.values.iter().all(|&v| v == t.values[0]), "{}", t.def.id);
        }
    }

    #[test]
    fn distance_track_grows_linearly() {
        use std::sync::Arc;
        let sk = Arc::new(Skeleton::humanml3d());
        let rest = synthetic::rest_pose();
        let frames: Vec<Vec<Vec3>> = (0..5)
            .map(|f| {
                let mut p = rest.clone();
                // both wrists start on top of each other, then separate along x
                p[20] = [0.05 * f as f64, 1.0, 0.0];
                p[21] = [-0.05 * f as f64, 1.0, 0.0];
                p
            })
            .collect();
        let m = MotionSequence::new(20.0, sk, frames).unwrap();
        let def = DescriptorDef::new("d", DescriptorKind::Distance, vec![20, 21], BodyPart::Spine);
        let t = &pose_descriptors(&m, &[def]).unwrap()[0];
        for (f, v) in t.values.iter().enumerate() {
            assert!((v - 0.1 * f as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn straightening_arm_gives_decreasing_cosine() {
        use std::sync::Arc;
        // shoulder at origin, elbow on +x, wrist swings from folded to straight
        let sk = Arc::new(Skeleton::humanml3d());
        let rest = synthetic::rest_pose();
        let n = 8;
        let frames: Vec<Vec<Vec3>> = (0..n)
            .map(|f| {
                let theta = 0.3 + (PI - 0.3) * f as f64 / (n - 1) as f64;
                let mut p = rest.clone();
                p[16] = [0.0, 0.0, 0.0];
                p[18] = [1.0, 0.0, 0.0];
                // interior angle theta at the elbow
                p[20] = [1.0 - theta.cos(), theta.sin(), 0.0];
                p
            })
            .collect();
        let m = MotionSequence::new(20.0, sk, frames).unwrap();
        let def = DescriptorDef::new("e", DescriptorKind::Angle, vec![16, 18, 20], BodyPart::LeftUpperLimb);
        let t = &pose_descriptors(&m, &[def]).unwrap()[0];
        // scalar oracle: cos of the interior angle
        for (f, v) in t.values.iter().enumerate() {
            let theta = 0.3 + (PI - 0.3) * f as f64 / (n - 1) as f64;
            assert!((v - theta.cos()).abs() < 1e-12);
        }
        assert!(t.values.windows(2).all(|w| w[1] < w[0]));
        assert!((t.values[n - 1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn turning_left_increases_orientation() {
        let m = synthetic::synthesize(&Action::Turn { radians: 1.2 }, 30, 20.0, 0.0, 0);
        let defs = default_descriptors(m.skeleton()).unwrap();
        let t = pose_descriptors(&m, &defs).unwrap();
        let o = t.iter().find(|t| t.def.id == "root_orientation").unwrap();
        assert!(o.values[0].abs() < 1e-12);
        assert!((o.values[29] - 1.2).abs() < 1e-9);
        let _ = Side::Left;
    }

    #[test]
    fn orientation_unwraps_past_pi() {
        let m = synthetic::synthesize(&Action::Turn { radians: 5.0 }, 60, 20.0, 0.0, 0);
        let defs = default_descriptors(m.skeleton()).unwrap();
        let t = pose_descriptors(&m, &defs).unwrap();
        let o = t.iter().find(|t| t.def.id == "root_orientation").unwrap();
        assert!((o.values[59] - 5.0).abs() < 1e-9);
        assert!(o.values.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    fn rot(axis: Vec3, angle: f64, v: Vec3) -> Vec3 {
        synthetic::rotate(v, axis, angle)
    }

    proptest! {
        #[test]
        fn angle_is_bounded_and_rigid_invariant(
            pts in prop::array::uniform3(prop::array::uniform3(-5.0f64..5.0)),
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -PI..PI,
            shift in prop::array::uniform3(-10.0f64..10.0),
        ) {
            let [a, b, c] = pts;
            let n = norm(axis);
            prop_assume!(n > 1e-3);
            prop_assume!(norm(sub(a, b)) > 1e-3 && norm(sub(c, b)) > 1e-3);
            let axis = [axis[0] / n, axis[1] / n, axis[2] / n];
            let v = angle_descriptor(a, b, c).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
            let t = |p: Vec3| {
                let r = rot(axis, angle, p);
                [r[0] + shift[0], r[1] + shift[1], r[2] + shift[2]]
            };
            let w = angle_descriptor(t(a), t(b), t(c)).unwrap();
            prop_assert!((v - w).abs() < 1e-9);
        }
    }
}
