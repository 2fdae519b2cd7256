//! Threshold rules turning clip descriptors into short phrases.

use serde::{Deserialize, Serialize};

use super::runs::ClipDescriptor;
use super::{DecomposeError, DescriptorKind};

/// Thresholds for one descriptor kind, in that kind's units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindThresholds {
    pub magnitude_lo: f64,
    pub magnitude_hi: f64,
    pub speed_lo: f64,
    pub speed_hi: f64,
    /// Frame deltas below this magnitude count as no change.
    pub deadband: f64,
}

impl KindThresholds {
    pub fn validate(&self, kind: DescriptorKind) -> Result<(), DecomposeError> {
        let all = [self.magnitude_lo, self.magnitude_hi, self.speed_lo, self.speed_hi, self.deadband];
        let err = |reason: &str| DecomposeError::InvalidThresholds {
            kind: kind.as_str(),
            reason: reason.to_string(),
        };
        if all.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite threshold"));
        }
        if self.magnitude_lo > self.magnitude_hi {
            return Err(err("magnitude_lo > magnitude_hi"));
        }
        if self.speed_lo > self.speed_hi {
            return Err(err("speed_lo > speed_hi"));
        }
        if self.deadband < 0.0 {
            return Err(err("negative deadband"));
        }
        Ok(())
    }
}

/// Thresholds for every descriptor kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionThresholds {
    pub angle: KindThresholds,
    pub distance: KindThresholds,
    pub height: KindThresholds,
    pub displacement: KindThresholds,
    pub orientation: KindThresholds,
}

impl Default for ConversionThresholds {
    /// Hand-set values for 20 fps motion in meters; `calibrate_thresholds`
    /// replaces them with dataset percentiles.
    fn default() -> Self {
        ConversionThresholds {
            angle: KindThresholds {
                magnitude_lo: 0.1,
                magnitude_hi: 0.5,
                speed_lo: 0.01,
                speed_hi: 0.05,
                deadband: 1e-3,
            },
            distance: KindThresholds {
                magnitude_lo: 0.05,
                magnitude_hi: 0.25,
                speed_lo: 0.005,
                speed_hi: 0.02,
                deadband: 1e-3,
            },
            height: KindThresholds {
                magnitude_lo: 0.05,
                magnitude_hi: 0.25,
                speed_lo: 0.005,
                speed_hi: 0.02,
                deadband: 1e-3,
            },
            displacement: KindThresholds {
                magnitude_lo: 0.1,
                magnitude_hi: 0.6,
                speed_lo: 0.01,
                speed_hi: 0.05,
                deadband: 2e-3,
            },
            orientation: KindThresholds {
                magnitude_lo: 0.2,
                magnitude_hi: 0.8,
                speed_lo: 0.01,
                speed_hi: 0.05,
                deadband: 2e-3,
            },
        }
    }
}

impl ConversionThresholds {
    pub fn get(&self, kind: DescriptorKind) -> &KindThresholds {
        match kind {
            DescriptorKind::Angle => &self.angle,
            DescriptorKind::Distance => &self.distance,
            DescriptorKind::Height => &self.height,
            DescriptorKind::Displacement => &self.displacement,
            DescriptorKind::Orientation => &self.orientation,
        }
    }

    pub fn get_mut(&mut self, kind: DescriptorKind) -> &mut KindThresholds {
        match kind {
            DescriptorKind::Angle => &mut self.angle,
            DescriptorKind::Distance => &mut self.distance,
            DescriptorKind::Height => &mut self.height,
            DescriptorKind::Displacement => &mut self.displacement,
            DescriptorKind::Orientation => &mut self.orientation,
        }
    }

    pub fn validate(&self) -> Result<(), DecomposeError> {
        DescriptorKind::ALL
            .iter()
            .try_for_each(|&k| self.get(k).validate(k))
    }
}

pub const HOLDING_STILL: &str = "holding still";
pub const STATIONARY: &str = "stationary";

fn behavior(kind: DescriptorKind, intensity: f64) -> &'static str {
    let rising = intensity > 0.0;
    match kind {
        DescriptorKind::Angle => {
            if rising {
                "extending"
            } else {
                "bending"
            }
        }
        DescriptorKind::Distance => {
            if rising {
                "moving apart"
            } else {
                "moving together"
            }
        }
        DescriptorKind::Height => {
            if rising {
                "raising"
            } else {
                "lowering"
            }
        }
        DescriptorKind::Displacement => "advancing",
        DescriptorKind::Orientation => {
            if rising {
                "turning left"
            } else {
                "turning right"
            }
        }
    }
}

/// `"<behavior> <magnitude> <speed>"` for one clip.
pub fn convert_description(clip: &ClipDescriptor, kind: DescriptorKind, t: &KindThresholds) -> String {
    let s = clip.intensity;
    if s == 0.0 {
        return HOLDING_STILL.to_string();
    }
    if kind == DescriptorKind::Displacement && s.abs() < t.deadband {
        return STATIONARY.to_string();
    }
    let magnitude = if s.abs() > t.magnitude_hi {
        "significantly"
    } else if s.abs() >= t.magnitude_lo {
        "moderately"
    } else {
        "slightly"
    };
    let speed = if clip.velocity < t.speed_lo {
        "slowly"
    } else if clip.velocity > t.speed_hi {
        "quickly"
    } else {
        "steadily"
    };
    format!("{} {} {}", behavior(kind, s), magnitude, speed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(s: f64, v: f64) -> ClipDescriptor {
        ClipDescriptor { start: 0, length: 1, intensity: s, velocity: v }
    }

    fn thr(mag: (f64, f64), speed: (f64, f64)) -> KindThresholds {
        KindThresholds {
            magnitude_lo: mag.0,
            magnitude_hi: mag.1,
            speed_lo: speed.0,
            speed_hi: speed.1,
            deadband: 0.01,
        }
    }

    #[test]
    fn bending_significantly_slowly() {
        let t = thr((0.1, 0.5), (0.05, 0.2));
        assert_eq!(
            convert_description(&clip(-0.9, 0.01), DescriptorKind::Angle, &t),
            "bending significantly slowly"
        );
        assert_eq!(
            convert_description(&clip(0.3, 0.1), DescriptorKind::Angle, &t),
            "extending moderately steadily"
        );
    }

    #[test]
    fn zero_clip_holds_still() {
        let t = thr((0.1, 0.5), (0.05, 0.2));
        for kind in DescriptorKind::ALL {
            assert_eq!(convert_description(&clip(0.0, 0.0), kind, &t), HOLDING_STILL);
        }
    }

    #[test]
    fn distance_apart_quickly() {
        let t = thr((0.1, 0.25), (0.01, 0.05));
        assert_eq!(
            convert_description(&clip(0.3, 0.1), DescriptorKind::Distance, &t),
            "moving apart significantly quickly"
        );
        assert_eq!(
            convert_description(&clip(-0.05, 0.001), DescriptorKind::Distance, &t),
            "moving together slightly slowly"
        );
    }

    #[test]
    fn per_kind_vocabulary() {
        let t = thr((0.1, 0.5), (0.05, 0.2));
        let c = |s| convert_description(&clip(s, 0.1), DescriptorKind::Height, &t);
        assert!(c(0.2).starts_with("raising"));
        assert!(c(-0.2).starts_with("lowering"));
        let o = |s| convert_description(&clip(s, 0.1), DescriptorKind::Orientation, &t);
        assert!(o(1.0).starts_with("turning left"));
        assert!(o(-1.0).starts_with("turning right"));
        let d = |s| convert_description(&clip(s, 0.001), DescriptorKind::Displacement, &t);
        assert_eq!(d(0.005), STATIONARY);
        assert!(d(0.7).starts_with("advancing significantly"));
    }

    #[test]
    fn validation() {
        let mut t = ConversionThresholds::default();
        t.validate().unwrap();
        t.height.magnitude_lo = 1.0;
        assert!(t.validate().is_err());
        let mut t = ConversionThresholds::default();
        t.angle.deadband = -1.0;
        assert!(t.validate().is_err());
    }
}
