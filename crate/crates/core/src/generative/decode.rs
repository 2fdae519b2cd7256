//! Mask schedule and confidence-based decoding.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stack::{AtomicFeatureGrid, GenerativeStack, StackInput};
use super::GenerateError;
use crate::rvq::TokenSequence;

type Result<T> = std::result::Result<T, GenerateError>;

/// Rows must be non-negative and sum to one within this tolerance.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Number of slots still masked after step `n` of `s`: `ceil(N cos(pi/2 * n/s))`.
pub fn mask_schedule(n: usize, s: usize, slots: usize) -> usize {
    assert!(s >= 1, "at least one decoding step");
    if n >= s {
        return 0;
    }
    let x = slots as f64 * (FRAC_PI_2 * n as f64 / s as f64).cos();
    // absorb rounding so exact products like 2 * cos(pi/3) do not ceil upward
    ((x - 1e-9).ceil().max(0.0) as usize).min(slots)
}

/// Per-slot token distributions given the current (partially masked) tokens.
pub trait Scorer {
    fn score(&self, tokens: &[Option<usize>]) -> Result<Vec<Vec<f64>>>;
}

fn validate_rows(rows: &[Vec<f64>], slots: usize) -> Result<usize> {
    if rows.len() != slots {
        return Err(GenerateError::DimensionMismatch {
            what: "scorer rows",
            expected: slots,
            found: rows.len(),
        });
    }
    let width = rows[0].len();
    for (slot, row) in rows.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        let ok = row.len() == width
            && width > 0
            && row.iter().all(|p| p.is_finite() && *p >= 0.0)
            && (sum - 1.0).abs() <= DISTRIBUTION_TOLERANCE;
        if !ok {
            return Err(GenerateError::InvalidScorerDistribution { slot });
        }
    }
    Ok(width)
}

/// Index with the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `p^(1/temperature)`; temperature 0 is argmax.
fn sample(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(row);
    }
    let weights: Vec<f64> = row.iter().map(|p| p.powf(1.0 / temperature)).collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return argmax(row);
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// One step of the decoding trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub kept: usize,
    pub tokens: Vec<Option<usize>>,
}

/// Iterative decoding from an all-masked sequence.
///
/// Each step samples every masked slot, records the sampled token's
/// probability as its confidence (frozen until the slot is re-masked), then
/// keeps the `N - mask_schedule(n + 1)` most confident slots overall, ties
/// going to the lower slot index.
pub fn decode_iterative(
    scorer: &dyn Scorer,
    slots: usize,
    steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<DecodeStep>)> {
    if steps == 0 {
        return Err(GenerateError::InvalidConfig("decoding needs at least one step".into()));
    }
    if slots == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<Option<usize>> = vec![None; slots];
    let mut confidence = vec![0.0; slots];
    let mut trace = Vec::with_capacity(steps);
    for n in 0..steps {
        let rows = scorer.score(&tokens)?;
        validate_rows(&rows, slots)?;
        for i in 0..slots {
            if tokens[i].is_none() {
                let t = sample(&rows[i], temperature, &mut rng);
                tokens[i] = Some(t);
                confidence[i] = rows[i][t];
            }
        }
        let keep = slots - mask_schedule(n + 1, steps, slots);
        let mut order: Vec<usize> = (0..slots).collect();
        order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
        for &i in &order[keep..] {
            tokens[i] = None;
            confidence[i] = 0.0;
        }
        trace.push(DecodeStep {
            kept: keep,
            tokens: tokens.clone(),
        });
    }
    let out = tokens.into_iter().map(|t| t.expect("all slots filled after the last step")).collect();
    Ok((out, trace))
}

/// Single-pass argmax over every slot.
pub fn decode_residual(scorer: &dyn Scorer, slots: usize) -> Result<Vec<usize>> {
    let rows = scorer.score(&vec![None; slots])?;
    validate_rows(&rows, slots)?;
    Ok(rows.iter().map(|r| argmax(r)).collect())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Base-layer scorer backed by a generative stack.
pub struct BaseScorer<'a> {
    pub stack: &'a GenerativeStack,
    pub text: &'a [f64],
    pub grid: &'a AtomicFeatureGrid,
}

impl Scorer for BaseScorer<'_> {
    fn score(&self, tokens: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
        let layers = vec![tokens.to_vec()];
        let input = StackInput {
            text: self.text,
            grid: self.grid,
            layers: &layers,
            indicator: 0,
        };
        Ok(matrix_rows(&self.stack.probabilities(&input)?))
    }
}

/// Residual-layer scorer: conditioned on all lower layers, ignores the slot mask.
pub struct ResidualScorer<'a> {
    pub stack: &'a GenerativeStack,
    pub text: &'a [f64],
    pub grid: &'a AtomicFeatureGrid,
    pub lower: Vec<Vec<Option<usize>>>,
}

impl Scorer for ResidualScorer<'_> {
    fn score(&self, _tokens: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
        let input = StackInput {
            text: self.text,
            grid: self.grid,
            layers: &self.lower,
            indicator: self.lower.len(),
        };
        Ok(matrix_rows(&self.stack.probabilities(&input)?))
    }
}

/// Decoding controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub slots: usize,
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Base layer by iterative decoding, then each residual layer by single-pass argmax.
pub fn generate_tokens(
    base: &GenerativeStack,
    residual: Option<&GenerativeStack>,
    text: &[f64],
    grid: &AtomicFeatureGrid,
    config: &DecodeConfig,
) -> Result<TokenSequence> {
    let scorer = BaseScorer { stack: base, text, grid };
    let (base_tokens, _) = decode_iterative(&scorer, config.slots, config.steps, config.temperature, config.seed)?;
    let mut layers = vec![base_tokens];
    if let Some(res) = residual {
        for _ in 0..res.config.indicators {
            let lower = layers.iter().map(|l| l.iter().map(|&t| Some(t)).collect()).collect();
            let scorer = ResidualScorer {
                stack: res,
                text,
                grid,
                lower,
            };
            layers.push(decode_residual(&scorer, config.slots)?);
        }
    }
    Ok(TokenSequence::from_layers(&layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    struct Oracle(Vec<usize>, usize);

    impl Scorer for Oracle {
        fn score(&self, _tokens: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(self
                .0
                .iter()
                .map(|&t| (0..self.1).map(|c| if c == t { 1.0 } else { 0.0 }).collect())
                .collect())
        }
    }

    struct Uniform(usize, usize);

    impl Scorer for Uniform {
        fn score(&self, _tokens: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![1.0 / self.1 as f64; self.1]; self.0])
        }
    }

    struct Broken;

    impl Scorer for Broken {
        fn score(&self, tokens: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
            let mut rows = vec![vec![0.5, 0.5]; tokens.len()];
            rows[1] = vec![0.5, 0.6];
            Ok(rows)
        }
    }

    #[test]
    fn schedule_values() {
        assert_eq!(mask_schedule(5, 10, 20), 15);
        assert_eq!(mask_schedule(0, 7, 13), 13);
        assert_eq!(mask_schedule(7, 7, 13), 0);
        assert_eq!(mask_schedule(2, 3, 2), 1);
    }

    #[test]
    fn oracle_recovers_truth() {
        let truth = vec![3, 1, 4, 1, 5, 9, 2, 6];
        for steps in [1, 4, 10] {
            let (out, trace) = decode_iterative(&Oracle(truth.clone(), 10), 8, steps, 1.0, 42).unwrap();
            assert_eq!(out, truth);
            // kept slots never change or get re-masked
            for w in trace.windows(2) {
                for i in 0..8 {
                    if let Some(t) = w[0].tokens[i] {
                        assert_eq!(w[1].tokens[i], Some(t));
                    }
                }
            }
        }
    }

    #[test]
    fn single_step_fills_everything() {
        let (out, trace) = decode_iterative(&Uniform(5, 3), 5, 1, 1.0, 0).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(trace.len(), 1);
        assert_eq!(trace[0].kept, 5);
    }

    #[test]
    fn uniform_scorer_matches_scripted_loop() {
        let (n, s, c, seed) = (6, 3, 4, 1234);
        let (out, trace) = decode_iterative(&Uniform(n, c), n, s, 1.0, seed).unwrap();
        let kept: Vec<usize> = trace.iter().map(|t| t.kept).collect();
        assert_eq!(kept, vec![n - mask_schedule(1, s, n), n - mask_schedule(2, s, n), n]);

        // scripted replay: equal confidences mean the lowest indices are kept
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens: Vec<Option<usize>> = vec![None; n];
        for (step, k) in kept.iter().enumerate() {
            for t in tokens.iter_mut() {
                if t.is_none() {
                    let u = rng.random::<f64>() * 1.0;
                    *t = Some(((u * c as f64).floor() as usize).min(c - 1));
                }
            }
            for t in tokens.iter_mut().skip(*k) {
                *t = None;
            }
            assert_eq!(tokens, trace[step].tokens, "step {step}");
        }
        assert_eq!(out, tokens.into_iter().map(Option::unwrap).collect::<Vec<_>>());
    }

    #[test]
    fn greedy_decoding_is_argmax() {
        let truth = vec![2, 0, 1];
        let (out, _) = decode_iterative(&Oracle(truth.clone(), 3), 3, 2, 0.0, 5).unwrap();
        assert_eq!(out, truth);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn invalid_distribution_is_reported() {
        let err = decode_iterative(&Broken, 3, 2, 1.0, 0).unwrap_err();
        assert!(matches!(err, GenerateError::InvalidScorerDistribution { slot: 1 }));
        assert!(matches!(decode_residual(&Broken, 3), Err(GenerateError::InvalidScorerDistribution { slot: 1 })));
    }

    #[test]
    fn residual_decode_with_oracle() {
        let truth = vec![4, 0, 2];
        assert_eq!(decode_residual(&Oracle(truth.clone(), 5), 3).unwrap(), truth);
    }

    proptest! {
        #[test]
        fn schedule_boundaries_and_monotone(slots in 0usize..=64, steps in 1usize..=64) {
            prop_assert_eq!(mask_schedule(0, steps, slots), slots);
            prop_assert_eq!(mask_schedule(steps, steps, slots), 0);
            for n in 0..steps {
                prop_assert!(mask_schedule(n + 1, steps, slots) <= mask_schedule(n, steps, slots));
            }
        }

        #[test]
        fn kept_count_follows_schedule(slots in 1usize..20, steps in 1usize..8, seed in any::<u64>()) {
            let (_, trace) = decode_iterative(&Uniform(slots, 3), slots, steps, 1.0, seed).unwrap();
            for (n, t) in trace.iter().enumerate() {
                prop_assert_eq!(t.kept, slots - mask_schedule(n + 1, steps, slots));
                prop_assert_eq!(t.tokens.iter().filter(|x| x.is_some()).count(), t.kept);
            }
        }
    }
}
