//! FID, R-Precision and Diversity over embedding feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("non-finite feature at row {row}")]
    NonFinite { row: usize },
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("k = {k} out of range for n = {n}")]
    KOutOfRange { k: usize, n: usize },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// `n x D` embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() < 2 {
            return Err(MetricsError::TooFewRows { needed: 2, found: rows.nrows() });
        }
        for i in 0..rows.nrows() {
            if rows.row(i).iter().any(|v| !v.is_finite()) {
                return Err(MetricsError::NonFinite { row: i });
            }
        }
        Ok(FeatureSet { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(MetricsError::DimensionMismatch { left: d, right: bad.len() });
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.rows.row_mean().transpose()
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.rows.row_mean();
        let mut centered = self.rows.clone();
        for mut r in centered.row_iter_mut() {
            r -= &mu;
        }
        centered.transpose() * &centered / (self.len() as f64 - 1.0)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets.
///
/// `tr((Sa Sb)^{1/2})` is computed as `tr((sqrt(Sa) Sb sqrt(Sa))^{1/2})`, which
/// shares its eigenvalues and stays symmetric.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let dmu = a.mean() - b.mean();
    let sa = a.covariance();
    let sb = b.covariance();
    let root_a = sqrt_psd(&sa);
    let inner = symmetrize(&(&root_a * &sb * &root_a));
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = dmu.norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Fraction of rows whose diagonal entry ranks within the top `k` of its row.
/// Ties are broken in favour of the lower column index.
pub fn r_precision(similarity: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = similarity.nrows();
    if n != similarity.ncols() {
        return Err(MetricsError::NotSquare { rows: n, cols: similarity.ncols() });
    }
    if k == 0 || k >= n {
        return Err(MetricsError::KOutOfRange { k, n });
    }
    let hits = (0..n)
        .filter(|&i| {
            let d = similarity[(i, i)];
            let ahead = (0..n)
                .filter(|&j| {
                    let s = similarity[(i, j)];
                    s > d || (s == d && j < i)
                })
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Rows sorted lexicographically so pair selection ignores input order.
fn canonical_rows(set: &FeatureSet) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = set.rows.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

/// Mean Euclidean distance over `pairs` seeded index pairs `(i, j)` with `i != j`.
pub fn diversity(set: &FeatureSet, pairs: usize, seed: u64) -> f64 {
    if pairs == 0 {
        return 0.0;
    }
    let rows = canonical_rows(set);
    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += rows[i]
            .iter()
            .zip(&rows[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    total / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> FeatureSet {
        FeatureSet::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0) + shift)).unwrap()
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_set(&mut rng, 50, 4, 0.0);
        assert!(fid(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn standardized_shifted_gaussian() {
        // samples with mean 0 / 1 and unbiased variance exactly 1
        let base = [-1.0, 1.0];
        let a = FeatureSet::from_rows(&base.iter().map(|&v| vec![v / 2f64.sqrt()]).collect::<Vec<_>>()).unwrap();
        let b = FeatureSet::from_rows(&base.iter().map(|&v| vec![v / 2f64.sqrt() + 1.0]).collect::<Vec<_>>()).unwrap();
        assert!((a.covariance()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_set(&mut rng, 40, 1, 0.0);
        let b = FeatureSet::new(a.rows().map(|v| 3.0 * v + 2.0)).unwrap();
        let (ma, mb) = (a.mean()[0], b.mean()[0]);
        let (sa, sb) = (a.covariance()[(0, 0)].sqrt(), b.covariance()[(0, 0)].sqrt());
        let expect = (ma - mb).powi(2) + (sa - sb).powi(2);
        assert!((fid(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    fn brute_fid(a: &FeatureSet, b: &FeatureSet) -> f64 {
        let d = a.dim();
        let mean = |s: &FeatureSet| -> Vec<f64> {
            (0..d).map(|j| (0..s.len()).map(|i| s.rows()[(i, j)]).sum::<f64>() / s.len() as f64).collect()
        };
        let cov = |s: &FeatureSet, mu: &[f64]| -> Vec<Vec<f64>> {
            (0..d)
                .map(|p| {
                    (0..d)
                        .map(|q| {
                            (0..s.len()).map(|i| (s.rows()[(i, p)] - mu[p]) * (s.rows()[(i, q)] - mu[q])).sum::<f64>()
                                / (s.len() as f64 - 1.0)
                        })
                        .collect()
                })
                .collect()
        };
        let (ma, mb) = (mean(a), mean(b));
        let (ca, cb) = (cov(a, &ma), cov(b, &mb));
        // eigenvalues of the non-symmetric product Sa Sb are real and non-negative
        let cbm = DMatrix::from_fn(d, d, |i, j| cb[i][j]);
        let prod: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (0..d).map(|k| ca[i][k] * cbm[(k, j)]).sum()).collect()).collect();
        let ev = nonsymmetric_real_eigenvalues(prod);
        let tr_sqrt: f64 = ev.iter().map(|l| l.max(0.0).sqrt()).sum();
        let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
        let tr: f64 = (0..d).map(|i| ca[i][i] + cb[i][i]).sum();
        dmu + tr - 2.0 * tr_sqrt
    }

    /// Eigenvalues of a matrix known to have a real non-negative spectrum, by
    /// unshifted QR iteration with Gram-Schmidt.
    fn nonsymmetric_real_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..2000 {
            let mut q = vec![vec![0.0; n]; n];
            let mut r = vec![vec![0.0; n]; n];
            for j in 0..n {
                let mut v: Vec<f64> = (0..n).map(|i| a[i][j]).collect();
                for k in 0..j {
                    let dot: f64 = (0..n).map(|i| q[i][k] * a[i][j]).sum();
                    r[k][j] = dot;
                    for i in 0..n {
                        v[i] -= dot * q[i][k];
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                r[j][j] = norm;
                for i in 0..n {
                    q[i][j] = if norm > 0.0 { v[i] / norm } else { 0.0 };
                }
            }
            a = (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| r[i][k] * q[k][j]).sum()).collect()).collect();
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    #[test]
    fn qr_oracle_sanity() {
        let mut ev = nonsymmetric_real_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fid_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random_set(&mut rng, 30, 3, 0.0);
            let b = random_set(&mut rng, 25, 3, 0.4);
            let got = fid(&a, &b).unwrap();
            let want = brute_fid(&a, &b);
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn fid_symmetry_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_set(&mut rng, 30, 3, 0.0);
        let b = random_set(&mut rng, 30, 3, 0.5);
        let ab = fid(&a, &b).unwrap();
        assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-6);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let r = DMatrix::from_fn(3, 3, |i, j| rot.matrix()[(i, j)]);
        let ra = FeatureSet::new(a.rows() * &r).unwrap();
        let rb = FeatureSet::new(b.rows() * &r).unwrap();
        assert!((ab - fid(&ra, &rb).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn fid_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_set(&mut rng, 5, 3, 0.0);
        let b = random_set(&mut rng, 5, 2, 0.0);
        assert_eq!(fid(&a, &b), Err(MetricsError::DimensionMismatch { left: 3, right: 2 }));
    }

    #[test]
    fn r_precision_small_cases() {
        let mut m = DMatrix::from_element(4, 4, 0.1);
        m.fill_diagonal(1.0);
        for k in 1..4 {
            assert_eq!(r_precision(&m, k).unwrap(), 1.0);
        }
        let mut m = DMatrix::from_element(3, 3, 0.5);
        m.fill_diagonal(0.0);
        assert_eq!(r_precision(&m, 1).unwrap(), 0.0);
        assert!(matches!(r_precision(&m, 3), Err(MetricsError::KOutOfRange { .. })));
        assert!(matches!(r_precision(&m, 0), Err(MetricsError::KOutOfRange { .. })));
    }

    #[test]
    fn r_precision_tie_goes_to_lower_column() {
        let m = DMatrix::from_element(3, 3, 1.0);
        // row 0: diagonal at column 0 wins ties; rows 1, 2 lose to column 0 at k=1
        assert!((r_precision(&m, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    fn rank_oracle(m: &DMatrix<f64>, k: usize) -> f64 {
        let n = m.nrows();
        let mut hits = 0;
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| m[(i, b)].partial_cmp(&m[(i, a)]).unwrap().then(a.cmp(&b)));
            if order[..k].contains(&i) {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn r_precision_matches_rank_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let m = DMatrix::from_fn(8, 8, |_, _| (rng.random_range(0..6) as f64) / 5.0);
            for k in 1..4 {
                assert_eq!(r_precision(&m, k).unwrap(), rank_oracle(&m, k));
            }
        }
    }

    #[test]
    fn diversity_cases() {
        let same = FeatureSet::new(DMatrix::from_element(5, 3, 0.7)).unwrap();
        assert_eq!(diversity(&same, 20, 1), 0.0);
        let anti = FeatureSet::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(diversity(&anti, 1, 99), 2.0);
    }

    #[test]
    fn diversity_scripted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 10, 3, 0.0);
        let got = diversity(&set, 30, 77);
        // replay the documented selection: canonical sort, then (i, j != i) pairs
        let mut rows: Vec<Vec<f64>> = (0..10).map(|i| set.rows().row(i).iter().copied().collect()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut pick = ChaCha8Rng::seed_from_u64(77);
        let mut sum = 0.0;
        for _ in 0..30 {
            let i = pick.random_range(0..10usize);
            let j0 = pick.random_range(0..9usize);
            let j = if j0 >= i { j0 + 1 } else { j0 };
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
            sum += d.sqrt();
        }
        assert!((got - sum / 30.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn r_precision_monotone_in_k(vals in prop::collection::vec(-1.0f64..1.0, 36)) {
            let m = DMatrix::from_row_slice(6, 6, &vals);
            let mut prev = 0.0;
            for k in 1..6 {
                let v = r_precision(&m, k).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
        }

        #[test]
        fn diversity_ignores_row_order(
            vals in prop::collection::vec(-1.0f64..1.0, 24),
            seed in any::<u64>(),
            shift in 0usize..8,
        ) {
            let a = FeatureSet::new(DMatrix::from_row_slice(8, 3, &vals)).unwrap();
            let b = FeatureSet::new(DMatrix::from_fn(8, 3, |i, j| a.rows()[((i + shift) % 8, j)])).unwrap();
            prop_assert_eq!(diversity(&a, 50, seed), diversity(&b, 50, seed));
        }

        #[test]
        fn fid_non_negative(vals in prop::collection::vec(-1.0f64..1.0, 40)) {
            let a = FeatureSet::new(DMatrix::from_row_slice(10, 2, &vals[..20])).unwrap();
            let b = FeatureSet::new(DMatrix::from_row_slice(10, 2, &vals[20..])).unwrap();
            prop_assert!(fid(&a, &b).unwrap() >= 0.0);
        }
    }
}
