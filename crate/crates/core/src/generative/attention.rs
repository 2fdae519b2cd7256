//! Scaled dot-product attention and its gradient.

use nalgebra::DMatrix;

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub weights: DMatrix<f64>,
    pub scale: f64,
}

/// `softmax(Q K^T / sqrt(d)) V` where `d` is the query width.
pub fn attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    attention_cached(q, k, v).0
}

pub fn attention_cached(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> (DMatrix<f64>, AttentionCache) {
    assert_eq!(q.ncols(), k.ncols(), "query/key width");
    assert_eq!(k.nrows(), v.nrows(), "key/value count");
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let weights = softmax_rows(&(q * k.transpose() * scale));
    let out = &weights * v;
    (out, AttentionCache { weights, scale })
}

/// Gradients with respect to `(Q, K, V)` given the output gradient.
pub fn attention_backward(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    cache: &AttentionCache,
    d_out: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = &cache.weights;
    let dv = a.transpose() * d_out;
    let da = d_out * v.transpose();
    let mut ds = da.component_mul(a);
    for i in 0..ds.nrows() {
        let dot = ds.row(i).sum();
        for j in 0..ds.ncols() {
            ds[(i, j)] -= a[(i, j)] * dot;
        }
    }
    ds *= cache.scale;
    let dq = &ds * k;
    let dk = ds.transpose() * q;
    (dq, dk, dv)
}
