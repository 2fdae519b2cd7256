//! Seeded k-means with k-means++ seeding.

use rand::Rng;

use crate::exec::Execution;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest code and its squared distance; ties go to the lowest index.
pub fn nearest(codes: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in codes.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

fn plus_plus_init<R: Rng>(rows: &[Vec<f64>], k: usize, rng: &mut R, exec: Execution) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(rows[rng.random_range(0..n)].clone());
    let mut dist: Vec<f64> = exec.map(rows, |r| sq_dist(r, &centers[0]));
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            // fewer distinct points than clusters
            rng.random_range(0..n)
        };
        let c = rows[pick].clone();
        let nd = exec.map_range(n, |i| dist[i].min(sq_dist(&rows[i], &c)));
        dist = nd;
        centers.push(c);
    }
    centers
}

/// Lloyd iterations from a k-means++ start. Empty clusters keep their previous
/// centroid. Result depends only on the input order and the RNG state.
pub fn kmeans<R: Rng>(rows: &[Vec<f64>], k: usize, iterations: usize, rng: &mut R, exec: Execution) -> Vec<Vec<f64>> {
    assert!(k >= 1 && rows.len() >= k, "kmeans needs at least k rows");
    let dim = rows[0].len();
    let mut centers = plus_plus_init(rows, k, rng, exec);
    let mut assignment: Vec<usize> = vec![usize::MAX; rows.len()];
    for _ in 0..iterations {
        let next: Vec<usize> = exec.map(rows, |r| nearest(&centers, r).0);
        if next == assignment {
            break;
        }
        assignment = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_masses() {
        let mut rows = vec![vec![0.0]; 500];
        rows.extend(vec![vec![1.0]; 500]);
        let mut c = kmeans(&rows, 2, 20, &mut ChaCha8Rng::seed_from_u64(1), Execution::Sequential);
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0], vec![1.0]]);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let codes = vec![vec![5.0], vec![0.0], vec![2.0], vec![9.0], vec![1.0], vec![2.0]];
        assert_eq!(nearest(&codes, &[2.0]).0, 2);
        assert_eq!(nearest(&codes, &[1.5]).0, 2);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..400).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let a = kmeans(&rows, 7, 30, &mut ChaCha8Rng::seed_from_u64(2), Execution::Sequential);
        let b = kmeans(&rows, 7, 30, &mut ChaCha8Rng::seed_from_u64(2), Execution::Parallel);
        assert_eq!(a, b);
    }
}
