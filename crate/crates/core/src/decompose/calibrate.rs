//! Percentile calibration of conversion thresholds from a dataset.

use std::collections::BTreeMap;

use super::descriptors::{pose_descriptors, DescriptorDef, DescriptorKind};
use super::runs::aggregate_runs;
use super::{ConversionThresholds, DecomposeError, KindThresholds};
use crate::exec::Execution;
use crate::motion::MotionDataset;

/// Minimum pooled clip count per kind.
pub const MIN_CLIPS_PER_KIND: usize = 10;

/// Linear-interpolation percentile (`q` in 0..=100) of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Statistics pooled over every clip of one descriptor kind.
#[derive(Debug, Clone, Default)]
pub struct PooledStats {
    pub magnitudes: Vec<f64>,
    pub velocities: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl PooledStats {
    fn extend(&mut self, other: PooledStats) {
        self.magnitudes.extend(other.magnitudes);
        self.velocities.extend(other.velocities);
        self.deltas.extend(other.deltas);
    }

    /// 33rd/66th percentiles of |S| and V; deadband from the 1st percentile of |delta|.
    pub fn thresholds(&self, kind: DescriptorKind) -> Result<KindThresholds, DecomposeError> {
        if self.magnitudes.len() < MIN_CLIPS_PER_KIND {
            return Err(DecomposeError::InsufficientData {
                kind: kind.as_str(),
                clips: self.magnitudes.len(),
            });
        }
        let mut m = self.magnitudes.clone();
        m.sort_by(f64::total_cmp);
        let mut v = self.velocities.clone();
        v.sort_by(f64::total_cmp);
        let deadband = if self.deltas.is_empty() {
            0.0
        } else {
            percentile(&self.deltas, 1.0)
        };
        Ok(KindThresholds {
            magnitude_lo: percentile_sorted(&m, 33.0),
            magnitude_hi: percentile_sorted(&m, 66.0),
            speed_lo: percentile_sorted(&v, 33.0),
            speed_hi: percentile_sorted(&v, 66.0),
            deadband,
        })
    }
}

/// Per-kind thresholds from dataset percentiles. Kinds absent from `defs`
/// keep their default thresholds.
pub fn calibrate_thresholds(
    dataset: &MotionDataset,
    defs: &[DescriptorDef],
    exec: Execution,
) -> Result<ConversionThresholds, DecomposeError> {
    let items = dataset.items();
    let per_motion = exec.try_map(items, |item| {
        let tracks = pose_descriptors(&item.motion, defs)?;
        let mut pooled: BTreeMap<DescriptorKind, PooledStats> = BTreeMap::new();
        for t in tracks {
            let stats = pooled.entry(t.def.kind).or_default();
            for c in aggregate_runs(&t.values, 0.0) {
                stats.magnitudes.push(c.intensity.abs());
                stats.velocities.push(c.velocity);
            }
            stats
                .deltas
                .extend(t.values.windows(2).map(|w| (w[1] - w[0]).abs()));
        }
        Ok::<_, DecomposeError>(pooled)
    })?;
    let mut pooled: BTreeMap<DescriptorKind, PooledStats> = BTreeMap::new();
    for m in per_motion {
        for (k, s) in m {
            pooled.entry(k).or_default().extend(s);
        }
    }
    let mut out = ConversionThresholds::default();
    for (kind, stats) in &pooled {
        *out.get_mut(*kind) = stats.thresholds(*kind)?;
    }
    Ok(out)
}
