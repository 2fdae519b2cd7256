//! Masked token generation conditioned on raw text and atomic text features.
//!
//! A stack of K blocks, each a transformer layer (text feature prepended as
//! slot 0) followed by compositional feature fusion (channel group `l`
//! attends to body part `l`'s atomic features), ends in a classification
//! head over codebook indices. The base stack is decoded iteratively from an
//! all-masked sequence; one shared residual stack, told which layer it
//! predicts through an indicator embedding, fills the residual layers.

mod attention;
mod decode;
mod stack;

pub use attention::{attention, attention_backward, attention_cached, softmax_rows, AttentionCache};
pub use decode::{
    argmax, decode_iterative, decode_residual, generate_tokens, mask_schedule, BaseScorer, DecodeConfig, DecodeStep,
    ResidualScorer, Scorer, DISTRIBUTION_TOLERANCE,
};
pub use stack::{
    cff, cff_parts, positional_encoding, transformer_layer, AtomicFeatureGrid, BlockParams, GenerativeStack,
    StackConfig, StackInput, DEFAULT_ATOMIC_DIM, DEFAULT_BLOCKS, DEFAULT_MODEL_DIM, DEFAULT_TEXT_DIM, PART_COUNT,
};

use std::f64::consts::FRAC_PI_2;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::Execution;
use crate::matrix_io::{self, MatrixIoError};
use crate::rvq::TokenSequence;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for layer {layer} (vocabulary {vocab})")]
    TokenOutOfRange { layer: usize, token: usize, vocab: usize },
    #[error("scorer returned an invalid distribution for slot {slot}")]
    InvalidScorerDistribution { slot: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Format(#[from] MatrixIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GenerateError> = std::result::Result<T, E>;

/// One conditioning/target pair for training.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub text: Vec<f64>,
    pub grid: AtomicFeatureGrid,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

fn example_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) ^ index as u64);
    rng
}

/// Input layers, per-slot targets and the residual indicator.
type TrainingView = (Vec<Vec<Option<usize>>>, Vec<Option<usize>>, usize);

/// Inputs and targets for one example at one step.
fn training_view(
    config: &StackConfig,
    ex: &TrainingExample,
    rng: &mut ChaCha8Rng,
) -> TrainingView {
    let n = ex.tokens.slots();
    if config.indicators == 0 {
        let base = ex.tokens.layer(0);
        let ratio = (FRAC_PI_2 * rng.random::<f64>()).cos();
        let count = ((ratio * n as f64).ceil() as usize).clamp(1, n);
        let mut layer: Vec<Option<usize>> = base.iter().map(|&t| Some(t)).collect();
        let mut targets = vec![None; n];
        for i in sample(rng, n, count).into_iter() {
            layer[i] = None;
            targets[i] = Some(base[i]);
        }
        (vec![layer], targets, 0)
    } else {
        let top = config.indicators.min(ex.tokens.layers() - 1);
        let v = rng.random_range(1..=top);
        let layers = (0..v).map(|j| ex.tokens.layer(j).into_iter().map(Some).collect()).collect();
        let targets = ex.tokens.layer(v).into_iter().map(Some).collect();
        (layers, targets, v)
    }
}

/// Plain gradient descent on the masked (base) or residual objective.
///
/// Each step averages the gradient over all examples; per-example masks and
/// residual indicators are drawn from streams keyed by (seed, step, index),
/// so the result is identical under sequential and parallel execution.
pub fn train_stack(
    stack: &mut GenerativeStack,
    examples: &[TrainingExample],
    config: &TrainConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(GenerateError::InvalidConfig("no training examples".into()));
    }
    let needed = if stack.config.indicators == 0 { 1 } else { 2 };
    if let Some(bad) = examples.iter().find(|e| e.tokens.layers() < needed || e.tokens.slots() == 0) {
        return Err(GenerateError::DimensionMismatch {
            what: "token layers",
            expected: needed,
            found: bad.tokens.layers(),
        });
    }
    let indexed: Vec<(usize, &TrainingExample)> = examples.iter().enumerate().collect();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let model = &*stack;
        let results = exec.try_map(&indexed, |(i, ex)| {
            let mut rng = example_rng(config.seed, step, *i);
            let (layers, targets, indicator) = training_view(&model.config, ex, &mut rng);
            let input = StackInput {
                text: &ex.text,
                grid: &ex.grid,
                layers: &layers,
                indicator,
            };
            model.loss_and_grad(&input, &targets)
        })?;
        let inv = 1.0 / examples.len() as f64;
        let mut total = 0.0;
        let mut grad = stack.zeros_like();
        for (l, g) in &results {
            total += l * inv;
            grad.axpy(inv, g);
        }
        if !total.is_finite() {
            return Err(GenerateError::Diverged { step });
        }
        losses.push(total);
        stack.axpy(-config.learning_rate, &grad);
    }
    Ok(losses)
}

const WEIGHTS_MAGIC: &[u8; 8] = b"ATGEN001";
const MAX_NAME: u64 = 256;

fn write_config<W: Write>(w: &mut W, c: &StackConfig) -> std::io::Result<()> {
    for v in [
        c.blocks,
        PART_COUNT,
        c.model_dim,
        c.atomic_dim,
        c.text_dim,
        c.vocab,
        c.indicators,
        c.ffn_hidden,
        c.positional as usize,
        c.input_vocabs.len(),
    ] {
        matrix_io::write_u64(w, v as u64)?;
    }
    for &v in &c.input_vocabs {
        matrix_io::write_u64(w, v as u64)?;
    }
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> Result<StackConfig> {
    let mut next = || -> Result<usize> {
        let v = matrix_io::read_u64(r)?;
        if v > 1 << 24 {
            return Err(MatrixIoError::Invalid(format!("implausible header value {v}")).into());
        }
        Ok(v as usize)
    };
    let blocks = next()?;
    let parts = next()?;
    if parts != PART_COUNT {
        return Err(GenerateError::DimensionMismatch {
            what: "body parts",
            expected: PART_COUNT,
            found: parts,
        });
    }
    let model_dim = next()?;
    let atomic_dim = next()?;
    let text_dim = next()?;
    let vocab = next()?;
    let indicators = next()?;
    let ffn_hidden = next()?;
    let positional = next()? != 0;
    let tables = next()?;
    let input_vocabs = (0..tables).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let c = StackConfig {
        blocks,
        model_dim,
        atomic_dim,
        text_dim,
        vocab,
        input_vocabs,
        indicators,
        ffn_hidden,
        positional,
    };
    c.validate()?;
    Ok(c)
}

/// Base stack plus the optional shared residual stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    pub base: GenerativeStack,
    pub residual: Option<GenerativeStack>,
}

impl GeneratorWeights {
    fn stacks(&self) -> Vec<(&'static str, &GenerativeStack)> {
        let mut out = vec![("base", &self.base)];
        if let Some(r) = &self.residual {
            out.push(("residual", r));
        }
        out
    }

    /// Magic, stack count, then per stack: its header and named matrices.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        matrix_io::write_magic(&mut w, WEIGHTS_MAGIC)?;
        let stacks = self.stacks();
        matrix_io::write_u64(&mut w, stacks.len() as u64)?;
        for (prefix, s) in stacks {
            write_config(&mut w, &s.config)?;
            let params = s.params();
            matrix_io::write_u64(&mut w, params.len() as u64)?;
            for (name, m) in params {
                let full = format!("{prefix}.{name}");
                matrix_io::write_u64(&mut w, full.len() as u64)?;
                w.write_all(full.as_bytes())?;
                matrix_io::write_matrix_body(&mut w, m)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        matrix_io::expect_magic(&mut r, WEIGHTS_MAGIC)?;
        let count = matrix_io::read_u64(&mut r)?;
        if !(1..=2).contains(&count) {
            return Err(MatrixIoError::Invalid(format!("expected 1 or 2 stacks, found {count}")).into());
        }
        let mut stacks = Vec::new();
        for (k, prefix) in ["base", "residual"].into_iter().take(count as usize).enumerate() {
            let config = read_config(&mut r)?;
            if (k == 0) != (config.indicators == 0) {
                return Err(MatrixIoError::Invalid(format!("{prefix} stack has {} indicators", config.indicators)).into());
            }
            let mut stack = GenerativeStack::zeros(config)?;
            let n = matrix_io::read_u64(&mut r)? as usize;
            let mut params = stack.params_mut();
            if n != params.len() {
                return Err(MatrixIoError::Invalid(format!("{prefix}: expected {} matrices, found {n}", params.len())).into());
            }
            for (name, slot) in params.iter_mut() {
                let len = matrix_io::read_u64(&mut r)?;
                if len > MAX_NAME {
                    return Err(MatrixIoError::Invalid("matrix name too long".into()).into());
                }
                let mut buf = vec![0u8; len as usize];
                r.read_exact(&mut buf)?;
                let found = String::from_utf8_lossy(&buf);
                let expected = format!("{prefix}.{name}");
                if found != expected {
                    return Err(MatrixIoError::Invalid(format!("expected matrix `{expected}`, found `{found}`")).into());
                }
                let m: DMatrix<f64> = matrix_io::read_matrix_body(&mut r)?;
                if m.shape() != slot.shape() {
                    return Err(MatrixIoError::Invalid(format!(
                        "`{expected}` has shape {:?}, expected {:?}",
                        m.shape(),
                        slot.shape()
                    ))
                    .into());
                }
                **slot = m;
            }
            drop(params);
            stacks.push(stack);
        }
        let mut it = stacks.into_iter();
        let base = it.next().expect("at least one stack");
        Ok(GeneratorWeights {
            base,
            residual: it.next(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(seed: u64, p: usize, w: usize) -> AtomicFeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AtomicFeatureGrid::new(
            (0..PART_COUNT)
                .map(|_| DMatrix::from_fn(p, w, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn examples() -> Vec<TrainingExample> {
        (0..3)
            .map(|k| TrainingExample {
                text: vec![k as f64 * 0.3 - 0.2, 0.5, -0.1],
                grid: grid(k, 2, 2),
                tokens: TokenSequence::from_layers(&[
                    vec![k as usize % 3, 1, 2, 0],
                    vec![3, 0, 1, 2],
                    vec![1, 3, 3, 0],
                ]),
            })
            .collect()
    }

    #[test]
    fn weights_roundtrip() {
        let base = GenerativeStack::random(StackConfig::base(3, 2, 6, 2, 3), 1).unwrap();
        let residual = GenerativeStack::random(StackConfig::residual(3, 2, 1, 6, 2, 3), 2).unwrap();
        let w = GeneratorWeights { base, residual: Some(residual) };
        let mut buf = Vec::new();
        w.write(&mut buf).unwrap();
        assert_eq!(GeneratorWeights::read(&buf[..]).unwrap(), w);
        buf.truncate(buf.len() - 1);
        assert!(GeneratorWeights::read(&buf[..]).is_err());
    }

    #[test]
    fn training_is_deterministic_across_execution_modes() {
        for config in [StackConfig::base(3, 1, 6, 2, 3), StackConfig::residual(3, 2, 1, 6, 2, 3)] {
            let cfg = TrainConfig { steps: 15, learning_rate: 0.2, seed: 9 };
            let mut a = GenerativeStack::random(config.clone(), 4).unwrap();
            let mut b = a.clone();
            let la = train_stack(&mut a, &examples(), &cfg, Execution::Sequential).unwrap();
            let lb = train_stack(&mut b, &examples(), &cfg, Execution::Parallel).unwrap();
            assert_eq!(la, lb);
            assert_eq!(a, b);
            assert!(la.last().unwrap() < &la[0]);
        }
    }

    #[test]
    fn generation_shapes_and_determinism() {
        let base = GenerativeStack::random(StackConfig::base(3, 1, 6, 2, 3), 1).unwrap();
        let residual = GenerativeStack::random(StackConfig::residual(3, 2, 1, 6, 2, 3), 2).unwrap();
        let g = grid(5, 3, 2);
        let cfg = DecodeConfig { slots: 5, steps: 4, temperature: 1.0, seed: 77 };
        let a = generate_tokens(&base, Some(&residual), &[0.1, 0.2, 0.3], &g, &cfg).unwrap();
        let b = generate_tokens(&base, Some(&residual), &[0.1, 0.2, 0.3], &g, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.slots(), 5);
        assert_eq!(a.layers(), 3);
        assert!(a.layer(0).iter().all(|&t| t < 3));
        let only_base = generate_tokens(&base, None, &[0.1, 0.2, 0.3], &g, &cfg).unwrap();
        assert_eq!(only_base.layers(), 1);
        assert_eq!(only_base.layer(0), a.layer(0));
    }
}
