//! Sign-run aggregation of descriptor tracks and time binning of clips.

use serde::{Deserialize, Serialize};

/// Summary of one monotone run of a descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipDescriptor {
    /// Index of the first delta in the run, i.e. the frame the run starts at.
    pub start: usize,
    /// Number of frame-to-frame deltas in the run.
    pub length: usize,
    /// Signed cumulative change over the run.
    pub intensity: f64,
    /// `|intensity| / length`.
    pub velocity: f64,
}

impl ClipDescriptor {
    fn new(start: usize, length: usize, intensity: f64) -> Self {
        ClipDescriptor {
            start,
            length,
            intensity,
            velocity: intensity.abs() / length as f64,
        }
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Split the frame-to-frame deltas of `values` into maximal constant-sign runs.
///
/// Deltas with magnitude below `deadband` are treated as zero, and zero deltas
/// extend whatever run is open. The runs cover all `len - 1` deltas in order.
/// Tracks shorter than two samples have no deltas and yield no clips.
pub fn aggregate_runs(values: &[f64], deadband: f64) -> Vec<ClipDescriptor> {
    let mut clips = Vec::new();
    if values.len() < 2 {
        return clips;
    }
    let mut start = 0;
    let mut run_sign = 0i8;
    let mut sum = 0.0;
    let mut len = 0;
    for (i, w) in values.windows(2).enumerate() {
        let mut d = w[1] - w[0];
        if d.abs() < deadband {
            d = 0.0;
        }
        let s = sign(d);
        if s != 0 && run_sign != 0 && s != run_sign {
            clips.push(ClipDescriptor::new(start, len, sum));
            start = i;
            sum = 0.0;
            len = 0;
            run_sign = s;
        } else if run_sign == 0 {
            run_sign = s;
        }
        sum += d;
        len += 1;
    }
    clips.push(ClipDescriptor::new(start, len, sum));
    clips
}

/// Bin of a clip starting at `start` when `frames` frames are split into
/// `periods` equal bins.
pub fn bin_index(start: usize, frames: usize, periods: usize) -> usize {
    debug_assert!(periods >= 1 && start < frames);
    ((start as u128 * periods as u128) / frames as u128) as usize
}

/// Distribute clips over `periods` bins by start frame. Bins may be empty.
pub fn bin_clips(clips: &[ClipDescriptor], frames: usize, periods: usize) -> Vec<Vec<ClipDescriptor>> {
    let mut bins = vec![Vec::new(); periods];
    for c in clips {
        bins[bin_index(c.start, frames, periods)].push(*c);
    }
    bins
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let clips = aggregate_runs(&[0.0, 1.0, 3.0, 2.0, 1.0, 1.5], 0.0);
        assert_eq!(
            clips,
            vec![
                ClipDescriptor { start: 0, length: 2, intensity: 3.0, velocity: 1.5 },
                ClipDescriptor { start: 2, length: 2, intensity: -2.0, velocity: 1.0 },
                ClipDescriptor { start: 4, length: 1, intensity: 0.5, velocity: 0.5 },
            ]
        );
    }

    #[test]
    fn monotone_track_is_one_clip() {
        let v: Vec<f64> = (0..37).map(|i| (i * i) as f64 * 0.25).collect();
        let clips = aggregate_runs(&v, 0.0);
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].intensity, v[36] - v[0]);
        assert_eq!(clips[0].length, 36);
    }

    #[test]
    fn constant_track_in_deadband() {
        let clips = aggregate_runs(&[2.0; 9], 0.01);
        assert_eq!(clips, vec![ClipDescriptor { start: 0, length: 8, intensity: 0.0, velocity: 0.0 }]);
    }

    #[test]
    fn zeros_extend_the_open_run() {
        let clips = aggregate_runs(&[0.0, 1.0, 1.0, 1.0, 0.0], 0.0);
        assert_eq!(clips.len(), 2);
        assert_eq!((clips[0].start, clips[0].length), (0, 3));
        assert_eq!((clips[1].start, clips[1].length), (3, 1));
        // leading zeros join the first signed run
        let clips = aggregate_runs(&[5.0, 5.0, 5.0, 4.0], 0.0);
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].intensity, -1.0);
    }

    #[test]
    fn small_deltas_are_ignored() {
        let clips = aggregate_runs(&[0.0, 1.0, 0.999, 2.0], 0.01);
        assert_eq!(clips.len(), 1);
        // the dropped -0.001 no longer counts toward the sum
        assert!((clips[0].intensity - 2.001).abs() < 1e-12);
    }

    #[test]
    fn two_samples_make_one_run() {
        assert_eq!(aggregate_runs(&[1.0, 0.5], 0.0).len(), 1);
        assert!(aggregate_runs(&[1.0], 0.0).is_empty());
    }

    #[test]
    fn binning_boundaries() {
        assert_eq!(bin_index(30, 100, 4), 1);
        assert_eq!(bin_index(0, 100, 4), 0);
        assert_eq!(bin_index(99, 100, 4), 3);
        assert_eq!(bin_index(5, 6, 1), 0);
    }

    proptest! {
        #[test]
        fn runs_partition_and_telescope(v in prop::collection::vec(-64i32..64, 2..200)) {
            // integer-valued samples make every partial sum exact
            let v: Vec<f64> = v.into_iter().map(|x| x as f64 * 0.125).collect();
            let clips = aggregate_runs(&v, 0.0);
            let total: usize = clips.iter().map(|c| c.length).sum();
            prop_assert_eq!(total, v.len() - 1);
            let mut next = 0;
            for c in &clips {
                prop_assert_eq!(c.start, next);
                prop_assert!(c.length >= 1);
                prop_assert!(c.velocity >= 0.0);
                prop_assert_eq!(c.velocity, c.intensity.abs() / c.length as f64);
                let max_step = v[c.start..=c.start + c.length]
                    .windows(2)
                    .map(|w| (w[1] - w[0]).abs())
                    .fold(0.0, f64::max);
                prop_assert!(c.velocity <= max_step);
                next += c.length;
            }
            let s: f64 = clips.iter().map(|c| c.intensity).sum();
            prop_assert_eq!(s, v[v.len() - 1] - v[0]);
        }

        #[test]
        fn binning_keeps_every_clip(
            starts in prop::collection::vec(0usize..500, 0..300),
            periods in 1usize..12,
        ) {
            let clips: Vec<ClipDescriptor> = starts
                .iter()
                .map(|&s| ClipDescriptor { start: s, length: 1, intensity: 0.0, velocity: 0.0 })
                .collect();
            let bins = bin_clips(&clips, 500, periods);
            prop_assert_eq!(bins.len(), periods);
            prop_assert_eq!(bins.iter().map(Vec::len).sum::<usize>(), clips.len());
            for (b, bin) in bins.iter().enumerate() {
                for c in bin {
                    prop_assert_eq!(c.start * periods / 500, b);
                }
            }
        }
    }
}
