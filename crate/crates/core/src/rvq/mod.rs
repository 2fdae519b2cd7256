//! Residual vector quantization of downsampled motion features.
//!
//! A fixed featurizer (window-averaged root-relative joint positions) stands
//! in front of a stack of k-means codebooks: one base layer plus `R` residual
//! layers, each quantizing what the previous layers left over. Every residual
//! codebook carries an extra all-zero code at index `C`, so a residual layer
//! can always abstain and the per-input residual norm never grows.

mod kmeans;

pub use kmeans::{kmeans, nearest, sq_dist};

use std::io::{BufRead, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::Execution;
use crate::matrix_io::{self, MatrixIoError};
use crate::motion::MotionSequence;

pub const DEFAULT_CODEBOOK_SIZE: usize = 512;
pub const DEFAULT_DOWNSAMPLE_RATIO: usize = 4;
pub const DEFAULT_RESIDUAL_LAYERS: usize = 5;
pub const DEFAULT_KMEANS_ITERATIONS: usize = 25;

const MODEL_MAGIC: &[u8; 8] = b"ATRVQ001";

#[derive(Debug, Error)]
pub enum RvqError {
    #[error("motion has {frames} frames, fewer than the downsample ratio {ratio}")]
    TooShortMotion { frames: usize, ratio: usize },
    #[error("{rows} feature rows cannot train a codebook of size {codebook_size}")]
    InsufficientData { rows: usize, codebook_size: usize },
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("token {index} at slot {slot}, layer {layer} is outside a codebook of {size} codes")]
    IndexOutOfRange {
        slot: usize,
        layer: usize,
        index: usize,
        size: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token file line {line}: {reason}")]
    TokenParse { line: usize, reason: String },
    #[error(transparent)]
    Format(#[from] MatrixIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RvqError> = std::result::Result<T, E>;

/// Window-averaged root-relative joint positions: `F / r` rows of `3 * J`.
pub fn featurize(motion: &MotionSequence, ratio: usize) -> Result<Vec<Vec<f64>>> {
    if ratio == 0 {
        return Err(RvqError::InvalidConfig("downsample ratio must be at least 1".into()));
    }
    let frames = motion.frame_count();
    if frames < ratio {
        return Err(RvqError::TooShortMotion { frames, ratio });
    }
    let root = motion.skeleton().root();
    let j = motion.joint_count();
    let slots = frames / ratio;
    Ok((0..slots)
        .map(|s| {
            let mut row = vec![0.0; 3 * j];
            for f in s * ratio..(s + 1) * ratio {
                let r = motion.position(f, root);
                for (k, p) in motion.frame(f).iter().enumerate() {
                    for a in 0..3 {
                        row[3 * k + a] += p[a] - r[a];
                    }
                }
            }
            for v in &mut row {
                *v /= ratio as f64;
            }
            row
        })
        .collect())
}

/// Featurize many motions and concatenate their rows.
pub fn featurize_batch(motions: &[MotionSequence], ratio: usize, exec: Execution) -> Result<Vec<Vec<f64>>> {
    Ok(exec
        .try_map(motions, |m| featurize(m, ratio))?
        .into_iter()
        .flatten()
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RvqTrainConfig {
    pub codebook_size: usize,
    pub residual_layers: usize,
    pub iterations: usize,
    pub seed: u64,
    pub downsample_ratio: usize,
}

impl RvqTrainConfig {
    pub fn new(codebook_size: usize, residual_layers: usize, seed: u64) -> Self {
        RvqTrainConfig {
            codebook_size,
            residual_layers,
            iterations: DEFAULT_KMEANS_ITERATIONS,
            seed,
            downsample_ratio: DEFAULT_DOWNSAMPLE_RATIO,
        }
    }
}

/// Base codebook plus residual codebooks (the latter with a trailing zero code).
#[derive(Debug, Clone, PartialEq)]
pub struct RvqModel {
    codebook_size: usize,
    feature_dim: usize,
    downsample_ratio: usize,
    seed: u64,
    layers: Vec<Vec<Vec<f64>>>,
}

/// Per-slot code indices, one column per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub indices: Vec<Vec<usize>>,
}

impl TokenSequence {
    pub fn slots(&self) -> usize {
        self.indices.len()
    }

    pub fn layers(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    /// Column `layer` across all slots.
    pub fn layer(&self, layer: usize) -> Vec<usize> {
        self.indices.iter().map(|row| row[layer]).collect()
    }

    /// Build from per-layer columns.
    pub fn from_layers(layers: &[Vec<usize>]) -> TokenSequence {
        let n = layers.first().map_or(0, Vec::len);
        TokenSequence {
            indices: (0..n).map(|s| layers.iter().map(|l| l[s]).collect()).collect(),
        }
    }

    /// Integer CSV, one slot per line, layers left to right.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in &self.indices {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<TokenSequence> {
        let mut indices = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|t| {
                    t.trim().parse::<usize>().map_err(|e| RvqError::TokenParse {
                        line: i + 1,
                        reason: format!("`{t}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = indices.first() {
                let first: &Vec<usize> = first;
                if first.len() != row.len() {
                    return Err(RvqError::TokenParse {
                        line: i + 1,
                        reason: format!("expected {} columns, found {}", first.len(), row.len()),
                    });
                }
            }
            indices.push(row);
        }
        if indices.is_empty() {
            return Err(RvqError::TokenParse {
                line: 0,
                reason: "no token rows".into(),
            });
        }
        Ok(TokenSequence { indices })
    }
}

impl RvqModel {
    /// Assemble a model from explicit codebooks. Residual codebooks must
    /// already include their zero code.
    pub fn from_codebooks(layers: Vec<Vec<Vec<f64>>>, downsample_ratio: usize, seed: u64) -> Result<Self> {
        let base = layers
            .first()
            .ok_or_else(|| RvqError::InvalidConfig("no codebooks".into()))?;
        let c = base.len();
        if c == 0 {
            return Err(RvqError::InvalidConfig("empty base codebook".into()));
        }
        let dim = base[0].len();
        for (l, book) in layers.iter().enumerate() {
            let expect = if l == 0 { c } else { c + 1 };
            if book.len() != expect {
                return Err(RvqError::InvalidConfig(format!(
                    "layer {l} has {} codes, expected {expect}",
                    book.len()
                )));
            }
            for code in book {
                if code.len() != dim {
                    return Err(RvqError::DimensionMismatch {
                        expected: dim,
                        found: code.len(),
                    });
                }
                if code.iter().any(|v| !v.is_finite()) {
                    return Err(RvqError::InvalidConfig(format!("non-finite code in layer {l}")));
                }
            }
        }
        Ok(RvqModel {
            codebook_size: c,
            feature_dim: dim,
            downsample_ratio,
            seed,
            layers,
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn residual_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn downsample_ratio(&self) -> usize {
        self.downsample_ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn codebook(&self, layer: usize) -> &[Vec<f64>] {
        &self.layers[layer]
    }

    /// Number of codes in `layer` (`C` for the base, `C + 1` for residuals).
    pub fn layer_size(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    fn check_dim(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.feature_dim {
            return Err(RvqError::DimensionMismatch {
                expected: self.feature_dim,
                found: row.len(),
            });
        }
        Ok(())
    }

    /// Greedy per-layer codes for one row, plus the residual after each layer.
    pub fn encode_row(&self, row: &[f64]) -> (Vec<usize>, Vec<Vec<f64>>) {
        let mut residual = row.to_vec();
        let mut codes = Vec::with_capacity(self.layers.len());
        let mut trace = Vec::with_capacity(self.layers.len());
        for book in &self.layers {
            let (idx, _) = nearest(book, &residual);
            for (r, c) in residual.iter_mut().zip(&book[idx]) {
                *r -= c;
            }
            codes.push(idx);
            trace.push(residual.clone());
        }
        (codes, trace)
    }

    pub fn encode(&self, features: &[Vec<f64>]) -> Result<TokenSequence> {
        self.encode_with(features, Execution::default())
    }

    pub fn encode_with(&self, features: &[Vec<f64>], exec: Execution) -> Result<TokenSequence> {
        for row in features {
            self.check_dim(row)?;
        }
        Ok(TokenSequence {
            indices: exec.map(features, |r| self.encode_row(r).0),
        })
    }

    /// Sum of the selected code vectors across layers, per slot.
    pub fn decode(&self, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        tokens
            .indices
            .iter()
            .enumerate()
            .map(|(slot, row)| {
                if row.len() > self.layers.len() {
                    return Err(RvqError::InvalidConfig(format!(
                        "slot {slot} has {} layers, model has {}",
                        row.len(),
                        self.layers.len()
                    )));
                }
                let mut out = vec![0.0; self.feature_dim];
                for (layer, &idx) in row.iter().enumerate() {
                    let book = &self.layers[layer];
                    let code = book.get(idx).ok_or(RvqError::IndexOutOfRange {
                        slot,
                        layer,
                        index: idx,
                        size: book.len(),
                    })?;
                    for (o, c) in out.iter_mut().zip(code) {
                        *o += c;
                    }
                }
                Ok(out)
            })
            .collect()
    }

    /// RMS of the residual after quantizing with layers `0..=l`, for each `l`.
    pub fn reconstruction_error(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        for row in features {
            self.check_dim(row)?;
        }
        let mut sums = vec![0.0; self.layers.len()];
        for row in features {
            let (_, trace) = self.encode_row(row);
            for (s, r) in sums.iter_mut().zip(&trace) {
                *s += r.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let denom = (features.len() * self.feature_dim).max(1) as f64;
        Ok(sums.into_iter().map(|s| (s / denom).sqrt()).collect())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        matrix_io::write_magic(&mut w, MODEL_MAGIC)?;
        for v in [
            self.codebook_size as u64,
            self.residual_layers() as u64,
            self.feature_dim as u64,
            self.downsample_ratio as u64,
            self.seed,
        ] {
            matrix_io::write_u64(&mut w, v)?;
        }
        for book in &self.layers {
            for code in book {
                for &v in code {
                    matrix_io::write_f64(&mut w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<RvqModel> {
        matrix_io::expect_magic(&mut r, MODEL_MAGIC)?;
        let c = matrix_io::read_u64(&mut r)? as usize;
        let residual = matrix_io::read_u64(&mut r)? as usize;
        let dim = matrix_io::read_u64(&mut r)? as usize;
        let ratio = matrix_io::read_u64(&mut r)? as usize;
        let seed = matrix_io::read_u64(&mut r)?;
        if c == 0 || dim == 0 || c > 1 << 20 || dim > 1 << 20 || residual > 64 {
            return Err(RvqError::InvalidConfig(format!(
                "implausible header C={c} R={residual} D={dim}"
            )));
        }
        let mut layers = Vec::with_capacity(residual + 1);
        for l in 0..=residual {
            let rows = if l == 0 { c } else { c + 1 };
            let mut book = Vec::with_capacity(rows);
            for _ in 0..rows {
                let mut code = Vec::with_capacity(dim);
                for _ in 0..dim {
                    code.push(matrix_io::read_f64(&mut r)?);
                }
                book.push(code);
            }
            layers.push(book);
        }
        RvqModel::from_codebooks(layers, ratio, seed)
    }
}

/// Layer-wise k-means codebooks; deterministic for a fixed seed.
pub fn train_codebooks(features: &[Vec<f64>], config: &RvqTrainConfig, exec: Execution) -> Result<RvqModel> {
    let c = config.codebook_size;
    if c == 0 {
        return Err(RvqError::InvalidConfig("codebook size must be at least 1".into()));
    }
    if features.len() < c {
        return Err(RvqError::InsufficientData {
            rows: features.len(),
            codebook_size: c,
        });
    }
    let dim = features[0].len();
    if dim == 0 {
        return Err(RvqError::InvalidConfig("empty feature rows".into()));
    }
    for row in features {
        if row.len() != dim {
            return Err(RvqError::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut residuals = features.to_vec();
    let mut layers = Vec::with_capacity(config.residual_layers + 1);
    for layer in 0..=config.residual_layers {
        let mut book = kmeans(&residuals, c, config.iterations, &mut rng, exec);
        if layer > 0 {
            book.push(vec![0.0; dim]);
        }
        residuals = exec.map(&residuals, |r| {
            let (idx, _) = nearest(&book, r);
            r.iter().zip(&book[idx]).map(|(a, b)| a - b).collect()
        });
        layers.push(book);
    }
    RvqModel::from_codebooks(layers, config.downsample_ratio, config.seed)
}
