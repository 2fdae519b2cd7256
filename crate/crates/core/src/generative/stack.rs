//! The stacked (transformer layer, CFF) generator with hand-derived gradients.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::attention::{attention_backward, attention_cached, softmax_rows, AttentionCache};
use super::GenerateError;
use crate::motion::BodyPart;

pub const PART_COUNT: usize = BodyPart::COUNT;
pub const DEFAULT_BLOCKS: usize = 2;
pub const DEFAULT_MODEL_DIM: usize = 96;
pub const DEFAULT_ATOMIC_DIM: usize = 16;
pub const DEFAULT_TEXT_DIM: usize = 32;

type Result<T> = std::result::Result<T, GenerateError>;

fn mismatch(what: &'static str, expected: usize, found: usize) -> GenerateError {
    GenerateError::DimensionMismatch { what, expected, found }
}

/// Shape of one generative stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackConfig {
    /// Number of (transformer layer, CFF) blocks.
    pub blocks: usize,
    pub model_dim: usize,
    pub atomic_dim: usize,
    pub text_dim: usize,
    /// Output classes of the classification head.
    pub vocab: usize,
    /// Token vocabulary of each input layer.
    pub input_vocabs: Vec<usize>,
    /// Residual indicators (0 for the base stack).
    pub indicators: usize,
    pub ffn_hidden: usize,
    pub positional: bool,
}

impl StackConfig {
    /// Base-layer stack over a codebook of size `c`.
    pub fn base(c: usize, blocks: usize, model_dim: usize, atomic_dim: usize, text_dim: usize) -> Self {
        StackConfig {
            blocks,
            model_dim,
            atomic_dim,
            text_dim,
            vocab: c,
            input_vocabs: vec![c],
            indicators: 0,
            ffn_hidden: 2 * model_dim,
            positional: true,
        }
    }

    /// Shared residual stack predicting layers `1..=r`; residual layers carry the zero code `c`.
    pub fn residual(c: usize, r: usize, blocks: usize, model_dim: usize, atomic_dim: usize, text_dim: usize) -> Self {
        let mut input_vocabs = vec![c];
        input_vocabs.extend(std::iter::repeat_n(c + 1, r.saturating_sub(1)));
        StackConfig {
            blocks,
            model_dim,
            atomic_dim,
            text_dim,
            vocab: c + 1,
            input_vocabs,
            indicators: r,
            ffn_hidden: 2 * model_dim,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GenerateError::InvalidConfig(msg));
        if self.blocks == 0 {
            return bad("block count must be at least 1".into());
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(PART_COUNT) {
            return bad(format!("model dim {} must be a positive multiple of {PART_COUNT}", self.model_dim));
        }
        if self.atomic_dim == 0 || self.text_dim == 0 || self.ffn_hidden == 0 || self.vocab == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.input_vocabs.is_empty() || self.input_vocabs.contains(&0) {
            return bad("input vocabularies must be non-empty and positive".into());
        }
        if self.indicators > 0 && self.input_vocabs.len() != self.indicators {
            return bad(format!(
                "residual stack with {} indicators needs {} input tables, has {}",
                self.indicators,
                self.indicators,
                self.input_vocabs.len()
            ));
        }
        Ok(())
    }

    pub fn group_dim(&self) -> usize {
        self.model_dim / PART_COUNT
    }
}

/// Atomic text embeddings, one `P x D_W` matrix per body part.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicFeatureGrid {
    parts: Vec<DMatrix<f64>>,
}

impl AtomicFeatureGrid {
    pub fn new(parts: Vec<DMatrix<f64>>) -> Result<Self> {
        if parts.len() != PART_COUNT {
            return Err(mismatch("atomic grid parts", PART_COUNT, parts.len()));
        }
        let (p, d) = parts[0].shape();
        if p == 0 || d == 0 {
            return Err(GenerateError::InvalidConfig("atomic grid must have periods and width".into()));
        }
        for m in &parts {
            if m.nrows() != p {
                return Err(mismatch("atomic grid periods", p, m.nrows()));
            }
            if m.ncols() != d {
                return Err(mismatch("atomic grid width", d, m.ncols()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(GenerateError::InvalidConfig("atomic grid has non-finite entries".into()));
            }
        }
        Ok(AtomicFeatureGrid { parts })
    }

    pub fn periods(&self) -> usize {
        self.parts[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.parts[0].ncols()
    }

    pub fn part(&self, l: usize) -> &DMatrix<f64> {
        &self.parts[l]
    }
}

/// Parameters of one (transformer layer, CFF) block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub text_in: DMatrix<f64>,
    pub text_out: DMatrix<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub part_in: Vec<DMatrix<f64>>,
    pub part_out: Vec<DMatrix<f64>>,
}

impl BlockParams {
    fn zeros(c: &StackConfig) -> Self {
        let (d, h, g, w, t) = (c.model_dim, c.ffn_hidden, c.group_dim(), c.atomic_dim, c.text_dim);
        BlockParams {
            text_in: DMatrix::zeros(t, d),
            text_out: DMatrix::zeros(d, t),
            wq: DMatrix::zeros(d, d),
            wk: DMatrix::zeros(d, d),
            wv: DMatrix::zeros(d, d),
            wo: DMatrix::zeros(d, d),
            w1: DMatrix::zeros(d, h),
            b1: DMatrix::zeros(1, h),
            w2: DMatrix::zeros(h, d),
            b2: DMatrix::zeros(1, d),
            part_in: vec![DMatrix::zeros(g, w); PART_COUNT],
            part_out: vec![DMatrix::zeros(w, g); PART_COUNT],
        }
    }
}

/// Full parameter set of a generative stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeStack {
    pub config: StackConfig,
    pub token_embeddings: Vec<DMatrix<f64>>,
    pub mask_embedding: DMatrix<f64>,
    pub indicator_embeddings: DMatrix<f64>,
    pub blocks: Vec<BlockParams>,
    pub head_w: DMatrix<f64>,
    pub head_b: DMatrix<f64>,
}

/// Inputs to one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StackInput<'a> {
    /// Raw text feature, length `D_T`.
    pub text: &'a [f64],
    pub grid: &'a AtomicFeatureGrid,
    /// Token rows of the input layers; `None` marks a `[MASK]` slot.
    pub layers: &'a [Vec<Option<usize>>],
    /// 0 for the base stack, `v` in `1..=R` for residual layer `v`.
    pub indicator: usize,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn add_row(m: &mut DMatrix<f64>, row: &DMatrix<f64>) {
    for mut r in m.row_iter_mut() {
        r += row;
    }
}

fn col_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

/// Sinusoidal positional encoding, `n x d`.
pub fn positional_encoding(n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |i, j| {
        let k = (j / 2) as f64;
        let angle = i as f64 / 10000f64.powf(2.0 * k / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub(crate) struct LayerCache {
    t: DMatrix<f64>,
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    attn: AttentionCache,
    z: DMatrix<f64>,
    h: DMatrix<f64>,
    u: DMatrix<f64>,
    g: DMatrix<f64>,
    y: DMatrix<f64>,
}

pub(crate) struct PartCache {
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    attn: AttentionCache,
    o: DMatrix<f64>,
}

fn layer_forward(b: &BlockParams, t: &DMatrix<f64>, m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, LayerCache) {
    let n = m.nrows();
    let d = m.ncols();
    let x0 = t * &b.text_in;
    let mut x = DMatrix::zeros(n + 1, d);
    x.row_mut(0).copy_from(&x0.row(0));
    x.view_mut((1, 0), (n, d)).copy_from(m);
    let q = &x * &b.wq;
    let k = &x * &b.wk;
    let v = &x * &b.wv;
    let (z, attn) = attention_cached(&q, &k, &v);
    let h = &x + &z * &b.wo;
    let mut u = &h * &b.w1;
    add_row(&mut u, &b.b1);
    let g = u.map(silu);
    let mut y = &h + &g * &b.w2;
    add_row(&mut y, &b.b2);
    let m1 = y.rows(1, n).into_owned();
    let t_out = t + (y.rows(0, 1) - x.rows(0, 1)) * &b.text_out;
    let cache = LayerCache {
        t: t.clone(),
        x,
        q,
        k,
        v,
        attn,
        z,
        h,
        u,
        g,
        y,
    };
    (t_out, m1, cache)
}

/// Returns (d_t, d_m) and accumulates parameter gradients into `gb`.
fn layer_backward(
    b: &BlockParams,
    c: &LayerCache,
    d_t_out: &DMatrix<f64>,
    d_m1: &DMatrix<f64>,
    gb: &mut BlockParams,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = d_m1.nrows();
    let d = d_m1.ncols();
    let mut d_t = d_t_out.clone();
    let diff = c.y.rows(0, 1) - c.x.rows(0, 1);
    gb.text_out += diff.transpose() * d_t_out;
    let d_diff = d_t_out * b.text_out.transpose();
    let mut dy = DMatrix::zeros(n + 1, d);
    dy.row_mut(0).copy_from(&d_diff.row(0));
    dy.view_mut((1, 0), (n, d)).copy_from(d_m1);
    let mut dx = DMatrix::zeros(n + 1, d);
    dx.row_mut(0).copy_from(&(-&d_diff).row(0));

    // feedforward
    let mut dh = dy.clone();
    gb.w2 += c.g.transpose() * &dy;
    gb.b2 += col_sums(&dy);
    let dg = &dy * b.w2.transpose();
    let du = dg.zip_map(&c.u, |a, u| a * silu_grad(u));
    gb.w1 += c.h.transpose() * &du;
    gb.b1 += col_sums(&du);
    dh += &du * b.w1.transpose();

    // attention
    dx += &dh;
    gb.wo += c.z.transpose() * &dh;
    let dz = &dh * b.wo.transpose();
    let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.attn, &dz);
    gb.wq += c.x.transpose() * &dq;
    gb.wk += c.x.transpose() * &dk;
    gb.wv += c.x.transpose() * &dv;
    dx += &dq * b.wq.transpose() + &dk * b.wk.transpose() + &dv * b.wv.transpose();

    let dx0 = dx.rows(0, 1).into_owned();
    gb.text_in += c.t.transpose() * &dx0;
    d_t += dx0 * b.text_in.transpose();
    (d_t, dx.rows(1, n).into_owned())
}

fn cff_forward(b: &BlockParams, m: &DMatrix<f64>, grid: &AtomicFeatureGrid) -> (DMatrix<f64>, Vec<PartCache>) {
    let g = m.ncols() / PART_COUNT;
    let mut out = m.clone();
    let mut caches = Vec::with_capacity(PART_COUNT);
    for l in 0..PART_COUNT {
        let x = m.columns(l * g, g).into_owned();
        let q = &x * &b.part_in[l];
        let w = grid.part(l);
        let (o, attn) = attention_cached(&q, w, w);
        let proj = &o * &b.part_out[l];
        let mut cols = out.columns_mut(l * g, g);
        cols += proj;
        caches.push(PartCache { x, q, attn, o });
    }
    (out, caches)
}

fn cff_backward(
    b: &BlockParams,
    caches: &[PartCache],
    grid: &AtomicFeatureGrid,
    d_out: &DMatrix<f64>,
    gb: &mut BlockParams,
) -> DMatrix<f64> {
    let g = d_out.ncols() / PART_COUNT;
    let mut dm = d_out.clone();
    for (l, c) in caches.iter().enumerate() {
        let dl = d_out.columns(l * g, g).into_owned();
        gb.part_out[l] += c.o.transpose() * &dl;
        let d_o = &dl * b.part_out[l].transpose();
        let w = grid.part(l);
        let (dq, _, _) = attention_backward(&c.q, w, w, &c.attn, &d_o);
        gb.part_in[l] += c.x.transpose() * &dq;
        let mut cols = dm.columns_mut(l * g, g);
        cols += dq * b.part_in[l].transpose();
    }
    dm
}

fn check_layer_shapes(b: &BlockParams, t: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<()> {
    if t.nrows() != 1 || t.ncols() != b.text_in.nrows() {
        return Err(mismatch("text feature", b.text_in.nrows(), t.ncols()));
    }
    if m.ncols() != b.wq.nrows() {
        return Err(mismatch("motion width", b.wq.nrows(), m.ncols()));
    }
    Ok(())
}

fn check_cff_shapes(b: &BlockParams, m: &DMatrix<f64>, grid: &AtomicFeatureGrid) -> Result<()> {
    if !m.ncols().is_multiple_of(PART_COUNT) || m.ncols() / PART_COUNT != b.part_in[0].nrows() {
        return Err(mismatch("motion width", b.part_in[0].nrows() * PART_COUNT, m.ncols()));
    }
    if grid.dim() != b.part_in[0].ncols() {
        return Err(mismatch("atomic feature width", b.part_in[0].ncols(), grid.dim()));
    }
    Ok(())
}

/// Text slot prepended, self-attention and feedforward with residuals,
/// split back into (refined text `1 x D_T`, refined motion `N x D_m`).
pub fn transformer_layer(b: &BlockParams, text: &DMatrix<f64>, motion: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_layer_shapes(b, text, motion)?;
    let (t, m, _) = layer_forward(b, text, motion);
    Ok((t, m))
}

/// Compositional feature fusion: each channel group attends to its own body part's atomic features.
pub fn cff(b: &BlockParams, motion: &DMatrix<f64>, grid: &AtomicFeatureGrid) -> Result<DMatrix<f64>> {
    check_cff_shapes(b, motion, grid)?;
    Ok(cff_forward(b, motion, grid).0)
}

/// Per-part attention outputs before the out-projection (`N x D_W` each).
pub fn cff_parts(b: &BlockParams, motion: &DMatrix<f64>, grid: &AtomicFeatureGrid) -> Result<Vec<DMatrix<f64>>> {
    check_cff_shapes(b, motion, grid)?;
    Ok(cff_forward(b, motion, grid).1.into_iter().map(|c| c.o).collect())
}

pub(crate) struct ForwardCache {
    embed_slots: Vec<Vec<Option<usize>>>,
    layers: Vec<(LayerCache, Vec<PartCache>)>,
    final_m: DMatrix<f64>,
}

impl GenerativeStack {
    pub fn zeros(config: StackConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        Ok(GenerativeStack {
            token_embeddings: config.input_vocabs.iter().map(|&v| DMatrix::zeros(v, d)).collect(),
            mask_embedding: DMatrix::zeros(1, d),
            indicator_embeddings: DMatrix::zeros(config.indicators, d),
            blocks: (0..config.blocks).map(|_| BlockParams::zeros(&config)).collect(),
            head_w: DMatrix::zeros(d, config.vocab),
            head_b: DMatrix::zeros(1, config.vocab),
            config,
        })
    }

    /// Gaussian initialization; output projections start small so each block is near identity.
    pub fn random(config: StackConfig, seed: u64) -> Result<Self> {
        let mut s = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let damped = ["wo", "w2", "text_out", "part_out"];
        for (name, m) in s.params_mut() {
            if name.ends_with("b1") || name.ends_with("b2") || name == "head_b" {
                continue;
            }
            let fan_in = if name.contains("embedding") { m.ncols() } else { m.nrows() };
            let mut std = 1.0 / (fan_in.max(1) as f64).sqrt();
            if damped.iter().any(|d| name.contains(d)) {
                std *= 0.1;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            m.apply(|v| *v = normal.sample(&mut rng));
        }
        Ok(s)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    /// Every parameter matrix with a stable dotted name.
    pub fn params(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out: Vec<(String, &DMatrix<f64>)> = Vec::new();
        for (i, t) in self.token_embeddings.iter().enumerate() {
            out.push((format!("token_embedding.{i}"), t));
        }
        out.push(("mask_embedding".into(), &self.mask_embedding));
        out.push(("indicator_embedding".into(), &self.indicator_embeddings));
        for (k, b) in self.blocks.iter().enumerate() {
            let named: [(&str, &DMatrix<f64>); 10] = [
                ("text_in", &b.text_in),
                ("text_out", &b.text_out),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ];
            for (n, m) in named {
                out.push((format!("block.{k}.{n}"), m));
            }
            for (l, m) in b.part_in.iter().enumerate() {
                out.push((format!("block.{k}.part_in.{l}"), m));
            }
            for (l, m) in b.part_out.iter().enumerate() {
                out.push((format!("block.{k}.part_out.{l}"), m));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Mutable view in the same order as [`GenerativeStack::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let mut out: Vec<(String, &mut DMatrix<f64>)> = Vec::new();
        for (i, t) in self.token_embeddings.iter_mut().enumerate() {
            out.push((format!("token_embedding.{i}"), t));
        }
        out.push(("mask_embedding".into(), &mut self.mask_embedding));
        out.push(("indicator_embedding".into(), &mut self.indicator_embeddings));
        for (k, b) in self.blocks.iter_mut().enumerate() {
            let named: [(&str, &mut DMatrix<f64>); 10] = [
                ("text_in", &mut b.text_in),
                ("text_out", &mut b.text_out),
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("w1", &mut b.w1),
                ("b1", &mut b.b1),
                ("w2", &mut b.w2),
                ("b2", &mut b.b2),
            ];
            for (n, m) in named {
                out.push((format!("block.{k}.{n}"), m));
            }
            for (l, m) in b.part_in.iter_mut().enumerate() {
                out.push((format!("block.{k}.part_in.{l}"), m));
            }
            for (l, m) in b.part_out.iter_mut().enumerate() {
                out.push((format!("block.{k}.part_out.{l}"), m));
            }
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn axpy(&mut self, scale: f64, other: &GenerativeStack) {
        let src = other.params();
        for ((_, dst), (_, s)) in self.params_mut().into_iter().zip(src) {
            dst.zip_apply(s, |d, v| *d += scale * v);
        }
    }

    fn validate_input(&self, input: &StackInput<'_>) -> Result<usize> {
        let c = &self.config;
        if input.text.len() != c.text_dim {
            return Err(mismatch("text feature", c.text_dim, input.text.len()));
        }
        if input.grid.dim() != c.atomic_dim {
            return Err(mismatch("atomic feature width", c.atomic_dim, input.grid.dim()));
        }
        let expected_layers = if c.indicators == 0 {
            if input.indicator != 0 {
                return Err(GenerateError::InvalidConfig("base stack takes indicator 0".into()));
            }
            1
        } else {
            if input.indicator == 0 || input.indicator > c.indicators {
                return Err(GenerateError::InvalidConfig(format!(
                    "indicator {} outside 1..={}",
                    input.indicator, c.indicators
                )));
            }
            input.indicator
        };
        if input.layers.len() != expected_layers {
            return Err(mismatch("input layers", expected_layers, input.layers.len()));
        }
        let n = input.layers[0].len();
        if n == 0 {
            return Err(GenerateError::InvalidConfig("no token slots".into()));
        }
        for (j, layer) in input.layers.iter().enumerate() {
            if layer.len() != n {
                return Err(mismatch("slots per layer", n, layer.len()));
            }
            if let Some(&bad) = layer.iter().flatten().find(|&&t| t >= c.input_vocabs[j]) {
                return Err(GenerateError::TokenOutOfRange {
                    layer: j,
                    token: bad,
                    vocab: c.input_vocabs[j],
                });
            }
        }
        Ok(n)
    }

    fn embed(&self, input: &StackInput<'_>, n: usize) -> DMatrix<f64> {
        let d = self.config.model_dim;
        let mut m = DMatrix::zeros(n, d);
        for (j, layer) in input.layers.iter().enumerate() {
            for (i, tok) in layer.iter().enumerate() {
                let mut row = m.row_mut(i);
                match tok {
                    Some(t) => row += self.token_embeddings[j].row(*t),
                    None => row += self.mask_embedding.row(0),
                }
            }
        }
        if input.indicator > 0 {
            add_row(&mut m, &self.indicator_embeddings.rows(input.indicator - 1, 1).into_owned());
        }
        if self.config.positional {
            m += positional_encoding(n, d);
        }
        m
    }

    pub(crate) fn forward_cached(&self, input: &StackInput<'_>) -> Result<(DMatrix<f64>, ForwardCache)> {
        let n = self.validate_input(input)?;
        let mut m = self.embed(input, n);
        let mut t = DMatrix::from_row_slice(1, self.config.text_dim, input.text);
        let mut layers = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (t2, m1, lc) = layer_forward(b, &t, &m);
            let (m2, pc) = cff_forward(b, &m1, input.grid);
            layers.push((lc, pc));
            t = t2;
            m = m2;
        }
        let mut logits = &m * &self.head_w;
        add_row(&mut logits, &self.head_b);
        let cache = ForwardCache {
            embed_slots: input.layers.to_vec(),
            layers,
            final_m: m,
        };
        Ok((logits, cache))
    }

    /// `N x vocab` logits.
    pub fn forward(&self, input: &StackInput<'_>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Per-slot probabilities.
    pub fn probabilities(&self, input: &StackInput<'_>) -> Result<DMatrix<f64>> {
        Ok(softmax_rows(&self.forward(input)?))
    }

    /// Mean cross-entropy over slots with a target, and its gradient.
    pub fn loss_and_grad(&self, input: &StackInput<'_>, targets: &[Option<usize>]) -> Result<(f64, GenerativeStack)> {
        let (logits, cache) = self.forward_cached(input)?;
        let n = logits.nrows();
        if targets.len() != n {
            return Err(mismatch("targets", n, targets.len()));
        }
        let count = targets.iter().flatten().count();
        let mut grad = self.zeros_like();
        if count == 0 {
            return Ok((0.0, grad));
        }
        let probs = softmax_rows(&logits);
        let mut loss = 0.0;
        let mut dlogits = DMatrix::zeros(n, self.config.vocab);
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= self.config.vocab {
                return Err(GenerateError::TokenOutOfRange {
                    layer: input.indicator,
                    token: t,
                    vocab: self.config.vocab,
                });
            }
            loss -= probs[(i, t)].max(f64::MIN_POSITIVE).ln();
            for j in 0..self.config.vocab {
                dlogits[(i, j)] = probs[(i, j)] - if j == t { 1.0 } else { 0.0 };
            }
        }
        let inv = 1.0 / count as f64;
        loss *= inv;
        dlogits *= inv;
        self.backward(input, &cache, &dlogits, &mut grad);
        Ok((loss, grad))
    }

    fn backward(&self, input: &StackInput<'_>, cache: &ForwardCache, dlogits: &DMatrix<f64>, grad: &mut GenerativeStack) {
        grad.head_w += cache.final_m.transpose() * dlogits;
        grad.head_b += col_sums(dlogits);
        let mut dm = dlogits * self.head_w.transpose();
        let mut dt = DMatrix::zeros(1, self.config.text_dim);
        for (k, (lc, pc)) in cache.layers.iter().enumerate().rev() {
            let b = &self.blocks[k];
            let gb = &mut grad.blocks[k];
            let dm1 = cff_backward(b, pc, input.grid, &dm, gb);
            let (dt2, dm0) = layer_backward(b, lc, &dt, &dm1, gb);
            dt = dt2;
            dm = dm0;
        }
        for (j, layer) in cache.embed_slots.iter().enumerate() {
            for (i, tok) in layer.iter().enumerate() {
                match tok {
                    Some(t) => {
                        let mut row = grad.token_embeddings[j].row_mut(*t);
                        row += dm.row(i);
                    }
                    None => {
                        let mut row = grad.mask_embedding.row_mut(0);
                        row += dm.row(i);
                    }
                }
            }
        }
        if input.indicator > 0 {
            let mut row = grad.indicator_embeddings.row_mut(input.indicator - 1);
            row += col_sums(&dm).row(0);
        }
    }
}
