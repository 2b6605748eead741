//! Lloyd's algorithm with random-point seeding and best-of-N restarts.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Matrix;

pub const DEFAULT_RESTARTS: usize = 20;
pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

/// Best-inertia Lloyd run out of `restarts` independently seeded runs.
/// Restart `r` draws from the `(seed, r)` stream, so results do not depend on run order.
pub fn kmeans(points: &Matrix, k: usize, restarts: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one cluster"));
    }
    if points.rows() < k {
        return Err(Error::invalid(format!(
            "k-means with k={k} needs at least {k} points, got {}",
            points.rows()
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = rng::stream(seed, Stream::KMeans, r as u64);
        let picks = index::sample(&mut rng, points.rows(), k).into_vec();
        let (res, _) = lloyd(points, points.select_rows(&picks), max_iter)?;
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Runs Lloyd iterations from the given centroids until assignments stop
/// changing or `max_iter` updates have been made. Also returns the inertia
/// measured after every assignment step.
pub fn lloyd(points: &Matrix, mut centroids: Matrix, max_iter: usize) -> Result<(KMeansResult, Vec<f64>)> {
    if points.cols() != centroids.cols() {
        return Err(Error::dim("lloyd", points.shape(), centroids.shape()));
    }
    let k = centroids.rows();
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one cluster"));
    }
    let (mut assignments, mut dists) = assign(points, &centroids);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        update_centroids(points, &mut centroids, &mut assignments, &mut dists);
        let (next, next_dists) = assign(points, &centroids);
        trace.push(next_dists.iter().sum());
        let stable = next == assignments;
        assignments = next;
        dists = next_dists;
        if stable {
            break;
        }
    }
    let inertia = dists.iter().sum();
    Ok((
        KMeansResult {
            centroids,
            assignments,
            inertia,
            iterations,
        },
        trace,
    ))
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lower index) and the squared distance to it.
fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    points
        .iter_rows()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter_rows().enumerate() {
                let d = squared_distance(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

/// Moves each centroid to the mean of its members. An empty cluster is
/// reseeded on the point currently farthest from its own centroid.
fn update_centroids(points: &Matrix, centroids: &mut Matrix, assignments: &mut [usize], dists: &mut [f64]) {
    let k = centroids.rows();
    let dim = centroids.cols();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far = None;
        for (i, &d) in dists.iter().enumerate() {
            if counts[assignments[i]] > 1 && far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        if let Some((i, _)) = far {
            counts[assignments[i]] -= 1;
            assignments[i] = j;
            counts[j] = 1;
            dists[i] = 0.0;
        }
    }
    let mut sums = Matrix::zeros(k, dim);
    for (p, &a) in points.iter_rows().zip(assignments.iter()) {
        for (s, &v) in sums.row_mut(a).iter_mut().zip(p) {
            *s += v;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        for (c, &s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
            *c = s * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_points() -> Matrix {
        Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]).unwrap()
    }

    /// Minimum inertia over every 2-partition of the rows.
    fn brute_force_two_partition(points: &Matrix) -> f64 {
        let n = points.rows();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut total = 0.0;
            for side in [true, false] {
                let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
                let sub = points.select_rows(&members);
                let mean: Vec<f64> = sub.col_sums().iter().map(|s| s / members.len() as f64).collect();
                total += sub.iter_rows().map(|r| squared_distance(r, &mean)).sum::<f64>();
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn four_point_example_matches_brute_force() {
        let pts = four_points();
        let oracle = brute_force_two_partition(&pts);
        assert_eq!(oracle, 1.0);
        let res = kmeans(&pts, 2, DEFAULT_RESTARTS, DEFAULT_MAX_ITER, 7).unwrap();
        assert_eq!(res.inertia, oracle);
        let mut cs: Vec<(f64, f64)> = res.centroids.iter_rows().map(|r| (r[0], r[1])).collect();
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cs, vec![(0.0, 0.5), (10.0, 0.5)]);
        assert_eq!(res.assignments[0], res.assignments[1]);
        assert_eq!(res.assignments[2], res.assignments[3]);
        assert_ne!(res.assignments[0], res.assignments[2]);
    }

    #[test]
    fn single_cluster_is_mean() {
        let res = kmeans(&four_points(), 1, 3, 50, 1).unwrap();
        assert_eq!(res.centroids.row(0), &[5.0, 0.5]);
        assert!(res.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let res = kmeans(&four_points(), 4, 2, 50, 1).unwrap();
        assert_eq!(res.inertia, 0.0);
    }

    #[test]
    fn argument_errors() {
        assert!(kmeans(&four_points(), 0, 1, 10, 0).is_err());
        assert!(kmeans(&four_points(), 5, 1, 10, 0).is_err());
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Two centroids start on top of each other; the second would stay empty.
        let pts = four_points();
        let init = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let (res, _) = lloyd(&pts, init, 50).unwrap();
        let mut counts = [0; 2];
        for &a in &res.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
        assert_eq!(res.inertia, 1.0);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let pts = Matrix::from_rows(&[[0.5, 0.0]]).unwrap();
        let cs = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert_eq!(assign(&pts, &cs).0, vec![0]);
    }

    #[test]
    fn row_permutation_invariance_on_four_points() {
        let pts = four_points();
        let oracle = brute_force_two_partition(&pts);
        for perm in [[3, 1, 0, 2], [2, 3, 1, 0], [1, 0, 3, 2]] {
            for seed in 0..5 {
                let res = kmeans(&pts.select_rows(&perm), 2, DEFAULT_RESTARTS, 100, seed).unwrap();
                assert_eq!(res.inertia, oracle);
            }
        }
    }
}
