//! Desk-scale text-motion alignment.
//!
//! Texts become hashed bag-of-words vectors and motions become the mean and
//! standard deviation of their downsampled features. Two linear projections
//! map both into a shared unit sphere, trained with the symmetric InfoNCE
//! loss over the cross-similarity matrix of a batch (diagonal = positives).

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::matrix_io::{self, MatrixIoError};
use crate::motion::MotionSequence;
use crate::rvq::{self, RvqError};

pub const TEXT_FEATURE_DIM: usize = 256;
pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

const MODEL_MAGIC: &[u8; 8] = b"ATALN001";
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("cannot normalize a zero vector")]
    ZeroVectorInput,
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("batch has {text} text rows and {motion} motion rows")]
    BatchMismatch { text: usize, motion: usize },
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Features(#[from] RvqError),
    #[error(transparent)]
    Format(#[from] MatrixIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AlignError> = std::result::Result<T, E>;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric tokens.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed hashed bag of words (unigrams plus bigrams), `dim` buckets.
pub fn text_features(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let tokens = tokenize_text(text);
    let mut add = |key: &str| {
        let h = fnv1a(key.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    };
    for t in &tokens {
        add(t);
    }
    for w in tokens.windows(2) {
        add(&format!("{} {}", w[0], w[1]));
    }
    v
}

/// Mean and population standard deviation of the downsampled motion features.
pub fn motion_features(motion: &MotionSequence, ratio: usize) -> Result<Vec<f64>> {
    let rows = rvq::featurize(motion, ratio)?;
    Ok(summarize_rows(&rows))
}

/// Column mean followed by column standard deviation.
pub fn summarize_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    mean.extend(var.into_iter().map(f64::sqrt));
    mean
}

fn normalize(v: DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if n.is_nan() || n <= ZERO_NORM {
        return Err(AlignError::ZeroVectorInput);
    }
    Ok(v / n)
}

/// Two linear projections into a shared embedding space plus a temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub text_projection: DMatrix<f64>,
    pub motion_projection: DMatrix<f64>,
    pub temperature: f64,
    pub seed: u64,
}

/// Index-aligned text and motion feature rows; row `i` of each is a positive pair.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub text: DMatrix<f64>,
    pub motion: DMatrix<f64>,
}

impl FeatureBatch {
    pub fn new(text: DMatrix<f64>, motion: DMatrix<f64>) -> Result<Self> {
        if text.nrows() != motion.nrows() {
            return Err(AlignError::BatchMismatch {
                text: text.nrows(),
                motion: motion.nrows(),
            });
        }
        if text.nrows() == 0 {
            return Err(AlignError::Empty("feature batch"));
        }
        Ok(FeatureBatch { text, motion })
    }

    pub fn len(&self) -> usize {
        self.text.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.text.nrows() == 0
    }
}

/// Row-normalized projection and the pre-normalization norms.
struct Projected {
    unit: DMatrix<f64>,
    norms: Vec<f64>,
}

fn project_rows(x: &DMatrix<f64>, p: &DMatrix<f64>, what: &'static str) -> Result<Projected> {
    if x.ncols() != p.nrows() {
        return Err(AlignError::DimensionMismatch {
            what,
            expected: p.nrows(),
            found: x.ncols(),
        });
    }
    let mut z = x * p;
    let mut norms = Vec::with_capacity(z.nrows());
    for i in 0..z.nrows() {
        let n = z.row(i).norm();
        if n.is_nan() || n <= ZERO_NORM {
            return Err(AlignError::ZeroVectorInput);
        }
        z.row_mut(i).unscale_mut(n);
        norms.push(n);
    }
    Ok(Projected { unit: z, norms })
}

/// Backprop through row normalization: `dz = (du - u (u . du)) / |z|`.
fn normalize_backward(proj: &Projected, d_unit: &DMatrix<f64>) -> DMatrix<f64> {
    let mut dz = d_unit.clone();
    for i in 0..dz.nrows() {
        let u = proj.unit.row(i);
        let dot = u.dot(&d_unit.row(i));
        let row = (d_unit.row(i) - u * dot) / proj.norms[i];
        dz.row_mut(i).copy_from(&row);
    }
    dz
}

impl AlignmentModel {
    /// Gaussian projections scaled by `1/sqrt(fan_in)`.
    pub fn random(text_dim: usize, motion_dim: usize, embed_dim: usize, temperature: f64, seed: u64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(AlignError::InvalidTemperature(temperature));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            DMatrix::from_row_slice(rows, cols, &data)
        };
        let text_projection = draw(text_dim, embed_dim);
        let motion_projection = draw(motion_dim, embed_dim);
        Ok(AlignmentModel {
            text_projection,
            motion_projection,
            temperature,
            seed,
        })
    }

    pub fn text_dim(&self) -> usize {
        self.text_projection.nrows()
    }

    pub fn motion_dim(&self) -> usize {
        self.motion_projection.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.text_projection.ncols()
    }

    fn embed(&self, p: &DMatrix<f64>, x: &[f64], what: &'static str) -> Result<DVector<f64>> {
        if x.len() != p.nrows() {
            return Err(AlignError::DimensionMismatch {
                what,
                expected: p.nrows(),
                found: x.len(),
            });
        }
        let v = p.transpose() * DVector::from_column_slice(x);
        normalize(v)
    }

    pub fn embed_text(&self, features: &[f64]) -> Result<DVector<f64>> {
        self.embed(&self.text_projection, features, "text features")
    }

    pub fn embed_motion(&self, features: &[f64]) -> Result<DVector<f64>> {
        self.embed(&self.motion_projection, features, "motion features")
    }

    /// Unit embeddings of every text row.
    pub fn embed_text_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(project_rows(x, &self.text_projection, "text features")?.unit)
    }

    /// Unit embeddings of every motion row.
    pub fn embed_motion_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(project_rows(x, &self.motion_projection, "motion features")?.unit)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        matrix_io::write_magic(&mut w, MODEL_MAGIC)?;
        matrix_io::write_u64(&mut w, self.text_dim() as u64)?;
        matrix_io::write_u64(&mut w, self.motion_dim() as u64)?;
        matrix_io::write_u64(&mut w, self.embed_dim() as u64)?;
        matrix_io::write_f64(&mut w, self.temperature)?;
        matrix_io::write_u64(&mut w, self.seed)?;
        for p in [&self.text_projection, &self.motion_projection] {
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    matrix_io::write_f64(&mut w, p[(i, j)])?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        matrix_io::expect_magic(&mut r, MODEL_MAGIC)?;
        let dt = matrix_io::read_u64(&mut r)? as usize;
        let dm = matrix_io::read_u64(&mut r)? as usize;
        let de = matrix_io::read_u64(&mut r)? as usize;
        let temperature = matrix_io::read_f64(&mut r)?;
        let seed = matrix_io::read_u64(&mut r)?;
        if dt > 1 << 20 || dm > 1 << 20 || de > 1 << 16 {
            return Err(MatrixIoError::Invalid(format!("implausible dims {dt}/{dm}/{de}")).into());
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(AlignError::InvalidTemperature(temperature));
        }
        let mut read = |rows: usize| -> Result<DMatrix<f64>> {
            let mut data = Vec::with_capacity(rows * de);
            for _ in 0..rows * de {
                data.push(matrix_io::read_f64(&mut r)?);
            }
            Ok(DMatrix::from_row_slice(rows, de, &data))
        };
        let text_projection = read(dt)?;
        let motion_projection = read(dm)?;
        Ok(AlignmentModel {
            text_projection,
            motion_projection,
            temperature,
            seed,
        })
    }
}

/// `A[i][j] = <motion_i, text_j>` over unit embeddings.
pub fn similarity_matrix(model: &AlignmentModel, batch: &FeatureBatch) -> Result<DMatrix<f64>> {
    let em = model.embed_motion_rows(&batch.motion)?;
    let et = model.embed_text_rows(&batch.text)?;
    Ok(&em * et.transpose())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over a square similarity matrix.
pub fn infonce_loss(a: &DMatrix<f64>, temperature: f64) -> f64 {
    let m = a.nrows();
    assert_eq!(m, a.ncols(), "similarity matrix must be square");
    let mut total = 0.0;
    for i in 0..m {
        let diag = a[(i, i)] / temperature;
        let row = log_sum_exp((0..m).map(|j| a[(i, j)] / temperature));
        let col = log_sum_exp((0..m).map(|j| a[(j, i)] / temperature));
        total += (diag - row) + (diag - col);
    }
    (-total / (2.0 * m as f64)).max(0.0)
}

fn softmax_into(values: impl Iterator<Item = f64> + Clone, out: &mut [f64]) {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(values) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Gradient of [`infonce_loss`] with respect to `a`.
pub fn infonce_grad(a: &DMatrix<f64>, temperature: f64) -> DMatrix<f64> {
    let m = a.nrows();
    assert_eq!(m, a.ncols(), "similarity matrix must be square");
    let scale = 1.0 / (2.0 * m as f64 * temperature);
    let mut g = DMatrix::zeros(m, m);
    let mut p = vec![0.0; m];
    for i in 0..m {
        softmax_into((0..m).map(|j| a[(i, j)] / temperature), &mut p);
        for j in 0..m {
            g[(i, j)] += scale * (p[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..m {
        softmax_into((0..m).map(|i| a[(i, j)] / temperature), &mut p);
        for i in 0..m {
            g[(i, j)] += scale * (p[i] - if i == j { 1.0 } else { 0.0 });
        }
    }
    g
}

/// Loss and projection gradients for one batch.
pub fn loss_and_gradients(model: &AlignmentModel, batch: &FeatureBatch) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let pm = project_rows(&batch.motion, &model.motion_projection, "motion features")?;
    let pt = project_rows(&batch.text, &model.text_projection, "text features")?;
    let a = &pm.unit * pt.unit.transpose();
    let loss = infonce_loss(&a, model.temperature);
    let g = infonce_grad(&a, model.temperature);
    let d_em = &g * &pt.unit;
    let d_et = g.transpose() * &pm.unit;
    let dzm = normalize_backward(&pm, &d_em);
    let dzt = normalize_backward(&pt, &d_et);
    let d_pm = batch.motion.transpose() * dzm;
    let d_pt = batch.text.transpose() * dzt;
    Ok((loss, d_pt, d_pm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: AlignmentModel,
    /// Mean batch loss before each step, plus the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on both projections.
pub fn fit(model: &AlignmentModel, batches: &[FeatureBatch], config: &FitConfig) -> Result<FitReport> {
    if batches.is_empty() {
        return Err(AlignError::Empty("training batches"));
    }
    let mut model = model.clone();
    let mut losses = Vec::with_capacity(config.steps + 1);
    let nb = batches.len() as f64;
    for step in 0..=config.steps {
        let mut loss = 0.0;
        let mut gt = DMatrix::zeros(model.text_dim(), model.embed_dim());
        let mut gm = DMatrix::zeros(model.motion_dim(), model.embed_dim());
        for b in batches {
            let (l, dt, dm) = loss_and_gradients(&model, b)?;
            loss += l / nb;
            gt += dt / nb;
            gm += dm / nb;
        }
        if !loss.is_finite() {
            return Err(AlignError::DivergenceDetected { step });
        }
        losses.push(loss);
        if step == config.steps {
            break;
        }
        model.text_projection -= gt * config.learning_rate;
        model.motion_projection -= gm * config.learning_rate;
        if model.text_projection.iter().chain(model.motion_projection.iter()).any(|v| !v.is_finite()) {
            return Err(AlignError::DivergenceDetected { step });
        }
    }
    Ok(FitReport { model, losses })
}

/// Column indices of each row sorted by descending score; ties keep the lower index first.
pub fn rank_rows(scores: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..scores.nrows())
        .map(|i| {
            let mut idx: Vec<usize> = (0..scores.ncols()).collect();
            idx.sort_by(|&a, &b| scores[(i, b)].total_cmp(&scores[(i, a)]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Gallery texts ranked for each motion query.
pub fn retrieve(model: &AlignmentModel, queries: &DMatrix<f64>, gallery: &DMatrix<f64>) -> Result<Vec<Vec<usize>>> {
    if gallery.nrows() == 0 {
        return Err(AlignError::Empty("gallery"));
    }
    let q = model.embed_motion_rows(queries)?;
    let g = model.embed_text_rows(gallery)?;
    Ok(rank_rows(&(q * g.transpose())))
}

/// Fraction of queries whose paired gallery item (same index) ranks first.
pub fn recall_at_1(ranks: &[Vec<usize>]) -> f64 {
    let hits = ranks.iter().enumerate().filter(|(i, r)| r[0] == *i).count();
    hits as f64 / ranks.len().max(1) as f64
}
