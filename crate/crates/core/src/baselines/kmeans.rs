use log::debug;

use crate::model::{ModelError, Result};
use crate::nn::{Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `[k, dim]`.
    pub centroids: Matrix<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest index.
fn nearest(p: &[f64], centroids: &Matrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding.
fn seed_centroids(points: &Matrix<f64>, k: usize, rng: &mut SeededRng) -> Matrix<f64> {
    let n = points.rows();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform(0.0, total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.below(n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn lloyd(points: &Matrix<f64>, k: usize, max_iter: usize, rng: &mut SeededRng) -> KMeansResult {
    let (n, dim) = (points.rows(), points.cols());
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    for iter in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let (j, d) = nearest(points.row(i), &centroids);
            changed |= assignments[i] != j;
            assignments[i] = j;
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed {
            debug!("k-means converged after {iter} iterations");
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &j) in assignments.iter().enumerate() {
            counts[j] += 1;
            sums.row_mut(j).iter_mut().zip(points.row(i)).for_each(|(s, &p)| *s += p);
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                let row: Vec<f64> = sums.row(j).iter().map(|s| s * inv).collect();
                centroids.row_mut(j).copy_from_slice(&row);
            } else {
                // Re-seed at the point farthest from its current centroid.
                let far = (0..n).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
                centroids.row_mut(j).copy_from_slice(points.row(far));
                dists[far] = 0.0;
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points.row(i), centroids.row(assignments[i]))).sum();
    KMeansResult { centroids, assignments, inertia, history }
}

/// Lloyd's algorithm from k-means++ seeds; the best of `restarts` runs by
/// inertia is returned (earliest restart on ties).
pub fn kmeans(points: &Matrix<f64>, k: usize, seed: u64, max_iter: usize, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || points.rows() < k {
        return Err(ModelError::Usage(format!("k-means needs 1 <= k <= N, got k = {k}, N = {}", points.rows())));
    }
    if points.data().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Domain("k-means input contains non-finite values".into()));
    }
    let root = SeededRng::new(seed);
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let run = lloyd(points, k, max_iter.max(1), &mut root.fork(r as u64));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(v.len(), 1, v.to_vec())
    }

    #[test]
    fn two_obvious_clusters_on_a_line() {
        let r = kmeans(&column(&[0.0, 0.1, 10.0, 10.1]), 2, 0, 300, 10).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let mut c = [r.centroids.get(0, 0), r.centroids.get(1, 0)];
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12 && (c[1] - 10.05).abs() < 1e-12);
        // Oracle: the best 2-partition by brute force.
        let pts = [0.0, 0.1, 10.0, 10.1];
        let best = (1..(1u32 << 4) - 1)
            .map(|mask| {
                let cost = |want: u32| {
                    let g: Vec<f64> = (0..4).filter(|i| (mask >> i) & 1 == want).map(|i| pts[i]).collect();
                    let m = g.iter().sum::<f64>() / g.len() as f64;
                    g.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                };
                cost(0) + cost(1)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((r.inertia - best).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_per_point_fits_exactly() {
        let pts = Matrix::from_rows(&[vec![0.0, 1.0], vec![3.0, -2.0], vec![5.0, 5.0]]);
        assert_eq!(kmeans(&pts, 3, 4, 300, 10).unwrap().inertia, 0.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(kmeans(&column(&[1.0]), 2, 0, 10, 1), Err(ModelError::Usage(_))));
        assert!(matches!(kmeans(&column(&[1.0, f64::NAN]), 1, 0, 10, 1), Err(ModelError::Domain(_))));
    }

    #[test]
    fn duplicate_points_leave_no_cluster_empty() {
        let r = kmeans(&column(&[1.0, 1.0, 1.0, 1.0, 7.0]), 3, 2, 300, 1).unwrap();
        assert!(r.inertia.is_finite());
        assert_eq!(r.centroids.rows(), 3);
    }

    proptest! {
        #[test]
        fn inertia_never_increases_and_runs_are_deterministic(
            v in prop::collection::vec(-5.0f64..5.0, 12..40), k in 1usize..5, seed in 0u64..100,
        ) {
            let pts = Matrix::from_vec(v.len() / 2, 2, v[..v.len() / 2 * 2].to_vec());
            prop_assume!(pts.rows() >= k);
            let r = kmeans(&pts, k, seed, 300, 3).unwrap();
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            for (i, &a) in r.assignments.iter().enumerate() {
                let d = sq_dist(pts.row(i), r.centroids.row(a));
                prop_assert!(nearest(pts.row(i), &r.centroids).1 >= d - 1e-9);
            }
            prop_assert_eq!(kmeans(&pts, k, seed, 300, 3).unwrap(), r);
        }
    }
}
