//! Procedural motions on the canonical skeleton.
//!
//! Used for fixtures, benchmarks and tests. Poses are built by rotating joint
//! subtrees of a rest pose, so limb lengths stay constant over time.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::motion::{joints::*, MotionSequence, Skeleton, Vec3};

/// Rest pose, Y up, facing +Z, left side on +X.
pub fn rest_pose() -> Vec<Vec3> {
    let mut p = vec![[0.0; 3]; COUNT];
    p[PELVIS] = [0.0, 0.95, 0.0];
    p[LEFT_HIP] = [0.09, 0.88, 0.0];
    p[RIGHT_HIP] = [-0.09, 0.88, 0.0];
    p[SPINE1] = [0.0, 1.05, -0.01];
    p[LEFT_KNEE] = [0.10, 0.50, 0.01];
    p[RIGHT_KNEE] = [-0.10, 0.50, 0.01];
    p[SPINE2] = [0.0, 1.18, -0.01];
    p[LEFT_ANKLE] = [0.10, 0.08, -0.02];
    p[RIGHT_ANKLE] = [-0.10, 0.08, -0.02];
    p[SPINE3] = [0.0, 1.30, 0.0];
    p[LEFT_FOOT] = [0.11, 0.02, 0.10];
    p[RIGHT_FOOT] = [-0.11, 0.02, 0.10];
    p[NECK] = [0.0, 1.50, 0.0];
    p[LEFT_COLLAR] = [0.07, 1.42, 0.0];
    p[RIGHT_COLLAR] = [-0.07, 1.42, 0.0];
    p[HEAD] = [0.0, 1.62, 0.03];
    p[LEFT_SHOULDER] = [0.18, 1.42, 0.0];
    p[RIGHT_SHOULDER] = [-0.18, 1.42, 0.0];
    p[LEFT_ELBOW] = [0.21, 1.15, -0.01];
    p[RIGHT_ELBOW] = [-0.21, 1.15, -0.01];
    p[LEFT_WRIST] = [0.23, 0.90, 0.04];
    p[RIGHT_WRIST] = [-0.23, 0.90, 0.04];
    p
}

/// Rodrigues rotation of `v` about unit `axis` by `angle`.
pub fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let dot = v[0] * axis[0] + v[1] * axis[1] + v[2] * axis[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    [
        v[0] * c + cross[0] * s + axis[0] * dot * (1.0 - c),
        v[1] * c + cross[1] * s + axis[1] * dot * (1.0 - c),
        v[2] * c + cross[2] * s + axis[2] * dot * (1.0 - c),
    ]
}

fn descendants(skeleton: &Skeleton, joint: usize) -> Vec<usize> {
    (0..skeleton.joint_count())
        .filter(|&j| {
            let mut cur = skeleton.parents()[j];
            while let Some(p) = cur {
                if p == joint {
                    return true;
                }
                cur = skeleton.parents()[p];
            }
            false
        })
        .collect()
}

/// Rotate every descendant of `joint` about the joint's position.
pub fn rotate_subtree(pose: &mut [Vec3], skeleton: &Skeleton, joint: usize, axis: Vec3, angle: f64) {
    let pivot = pose[joint];
    for d in descendants(skeleton, joint) {
        let rel = [
            pose[d][0] - pivot[0],
            pose[d][1] - pivot[1],
            pose[d][2] - pivot[2],
        ];
        let r = rotate(rel, axis, angle);
        pose[d] = [pivot[0] + r[0], pivot[1] + r[1], pivot[2] + r[2]];
    }
}

/// Left or right limb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Parametric actions with a caption used by fixtures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Idle,
    Walk { speed: f64 },
    RaiseArm(Side),
    BendElbow(Side),
    Squat,
    Turn { radians: f64 },
    Stomp(Side),
    Wave(Side),
}

impl Action {
    pub fn caption(&self) -> String {
        let side = |s: &Side| match s {
            Side::Left => "left",
            Side::Right => "right",
        };
        match self {
            Action::Idle => "a person stands still".into(),
            Action::Walk { .. } => "a person walks forward".into(),
            Action::RaiseArm(s) => format!("a person raises the {} arm", side(s)),
            Action::BendElbow(s) => format!("a person bends the {} elbow", side(s)),
            Action::Squat => "a person squats down and stands up".into(),
            Action::Turn { radians } if *radians >= 0.0 => "a person turns to the left".into(),
            Action::Turn { .. } => "a person turns to the right".into(),
            Action::Stomp(s) => format!("he stomps his {} foot", side(s)),
            Action::Wave(s) => format!("a person waves with the {} hand", side(s)),
        }
    }

    pub const GALLERY: [Action; 9] = [
        Action::Idle,
        Action::Walk { speed: 1.2 },
        Action::RaiseArm(Side::Left),
        Action::RaiseArm(Side::Right),
        Action::BendElbow(Side::Left),
        Action::Squat,
        Action::Turn { radians: 1.5 },
        Action::Stomp(Side::Left),
        Action::Wave(Side::Right),
    ];
}

fn pick(side: Side, left: usize, right: usize) -> usize {
    match side {
        Side::Left => left,
        Side::Right => right,
    }
}

const X: Vec3 = [1.0, 0.0, 0.0];
const Y: Vec3 = [0.0, 1.0, 0.0];
const Z: Vec3 = [0.0, 0.0, 1.0];

fn pose_at(action: &Action, skeleton: &Skeleton, t: f64, seconds: f64) -> Vec<Vec3> {
    let mut p = rest_pose();
    // normalized progress and a smooth 0 -> 1 -> 0 envelope
    let u = (t / seconds).clamp(0.0, 1.0);
    let bump = (PI * u).sin();
    let mut root_offset = [0.0; 3];
    let mut yaw = 0.0;
    match *action {
        Action::Idle => {
            root_offset[1] = 0.005 * (2.0 * PI * 0.3 * t).sin();
        }
        Action::Walk { speed } => {
            let phase = 2.0 * PI * 1.8 * t;
            let swing = 0.45 * phase.sin();
            rotate_subtree(&mut p, skeleton, LEFT_HIP, X, -swing);
            rotate_subtree(&mut p, skeleton, RIGHT_HIP, X, swing);
            rotate_subtree(&mut p, skeleton, LEFT_KNEE, X, 0.5 * (0.5 + 0.5 * (phase + 1.2).sin()));
            rotate_subtree(&mut p, skeleton, RIGHT_KNEE, X, 0.5 * (0.5 - 0.5 * (phase + 1.2).sin()));
            rotate_subtree(&mut p, skeleton, LEFT_SHOULDER, X, 0.35 * phase.sin());
            rotate_subtree(&mut p, skeleton, RIGHT_SHOULDER, X, -0.35 * phase.sin());
            root_offset = [0.0, 0.02 * (2.0 * phase).cos(), speed * t];
        }
        Action::RaiseArm(side) => {
            let sh = pick(side, LEFT_SHOULDER, RIGHT_SHOULDER);
            let sign = if side == Side::Left { 1.0 } else { -1.0 };
            rotate_subtree(&mut p, skeleton, sh, Z, sign * 2.6 * bump);
        }
        Action::BendElbow(side) => {
            let el = pick(side, LEFT_ELBOW, RIGHT_ELBOW);
            rotate_subtree(&mut p, skeleton, el, X, -2.2 * bump);
        }
        Action::Squat => {
            let a = 1.1 * bump;
            rotate_subtree(&mut p, skeleton, LEFT_HIP, X, -a);
            rotate_subtree(&mut p, skeleton, RIGHT_HIP, X, -a);
            rotate_subtree(&mut p, skeleton, LEFT_KNEE, X, 2.0 * a);
            rotate_subtree(&mut p, skeleton, RIGHT_KNEE, X, 2.0 * a);
            rotate_subtree(&mut p, skeleton, SPINE1, X, 0.4 * a);
            // keep the feet on the ground
            let drop = p[LEFT_ANKLE][1] - 0.08;
            root_offset[1] = -drop;
        }
        Action::Turn { radians } => {
            yaw = radians * (0.5 - 0.5 * (PI * u).cos());
        }
        Action::Stomp(side) => {
            let hip = pick(side, LEFT_HIP, RIGHT_HIP);
            let knee = pick(side, LEFT_KNEE, RIGHT_KNEE);
            let lift = if u < 0.6 { (PI * u / 0.6).sin() } else { 0.0 };
            rotate_subtree(&mut p, skeleton, hip, X, -lift);
            rotate_subtree(&mut p, skeleton, knee, X, 1.2 * lift);
            let sh = pick(side, LEFT_SHOULDER, RIGHT_SHOULDER);
            rotate_subtree(&mut p, skeleton, sh, X, -0.2 * lift);
        }
        Action::Wave(side) => {
            let sh = pick(side, LEFT_SHOULDER, RIGHT_SHOULDER);
            let el = pick(side, LEFT_ELBOW, RIGHT_ELBOW);
            let sign = if side == Side::Left { 1.0 } else { -1.0 };
            let raise = (3.0 * bump).min(1.0);
            rotate_subtree(&mut p, skeleton, sh, Z, sign * 2.3 * raise);
            rotate_subtree(&mut p, skeleton, el, Z, sign * 0.6 * raise * (2.0 * PI * 2.0 * t).sin());
        }
    }
    let pelvis = p[PELVIS];
    for q in p.iter_mut() {
        let rel = [q[0] - pelvis[0], q[1] - pelvis[1], q[2] - pelvis[2]];
        let r = rotate(rel, Y, yaw);
        *q = [
            pelvis[0] + r[0] + root_offset[0],
            pelvis[1] + r[1] + root_offset[1],
            pelvis[2] + r[2] + root_offset[2],
        ];
    }
    p
}

/// Render `action` for `frames` frames at `fps`, with optional positional jitter.
pub fn synthesize(action: &Action, frames: usize, fps: f64, jitter: f64, seed: u64) -> MotionSequence {
    let skeleton = Arc::new(Skeleton::humanml3d());
    let seconds = (frames.max(2) - 1) as f64 / fps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(frames * COUNT);
    for f in 0..frames {
        let t = f as f64 / fps;
        for q in pose_at(action, &skeleton, t, seconds) {
            if jitter > 0.0 {
                positions.push([
                    q[0] + jitter * (rng.random::<f64>() - 0.5),
                    q[1] + jitter * (rng.random::<f64>() - 0.5),
                    q[2] + jitter * (rng.random::<f64>() - 0.5),
                ]);
            } else {
                positions.push(q);
            }
        }
    }
    MotionSequence::from_flat(fps, skeleton, positions).expect("synthetic motion is valid")
}

/// A smooth random motion: every joint follows its own random sinusoid around
/// the rest pose.
pub fn random_motion<R: Rng>(rng: &mut R, frames: usize, fps: f64) -> MotionSequence {
    let skeleton = Arc::new(Skeleton::humanml3d());
    let rest = rest_pose();
    let params: Vec<[(f64, f64, f64); 3]> = (0..COUNT)
        .map(|_| {
            std::array::from_fn(|_| {
                (
                    rng.random_range(0.0..0.3),
                    rng.random_range(0.1..2.5),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
        })
        .collect();
    let mut positions = Vec::with_capacity(frames * COUNT);
    for f in 0..frames {
        let t = f as f64 / fps;
        for (j, r) in rest.iter().enumerate() {
            let mut q = *r;
            for a in 0..3 {
                let (amp, freq, phase) = params[j][a];
                q[a] += amp * (2.0 * PI * freq * t + phase).sin();
            }
            positions.push(q);
        }
    }
    MotionSequence::from_flat(fps, skeleton, positions).expect("random motion is valid")
}

/// Constant motion holding the rest pose.
pub fn still_motion(frames: usize, fps: f64) -> MotionSequence {
    let skeleton = Arc::new(Skeleton::humanml3d());
    let rest = rest_pose();
    let positions = (0..frames).flat_map(|_| rest.iter().copied()).collect();
    MotionSequence::from_flat(fps, skeleton, positions).expect("still motion is valid")
}
