//! Clustering head: Student-t soft assignments, the sharpened target
//! distribution, KL(P‖Q) and its gradients w.r.t. embeddings and centroids.

use crate::error::{Error, Result};
use crate::kmeans::squared_distance;
use crate::tensor::Matrix;

/// Degrees of freedom of the Student-t kernel.
pub const ALPHA: f64 = 1.0;
/// Default sharpening exponent of the target distribution.
pub const DEFAULT_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub q: Matrix,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub p: Matrix,
    pub s: f64,
    /// Soft cluster frequencies: column sums of Q.
    pub frequencies: Vec<f64>,
}

fn check_head(z: &Matrix, centroids: &Matrix, alpha: f64) -> Result<()> {
    if centroids.rows() == 0 {
        return Err(Error::invalid("clustering head needs at least one centroid"));
    }
    if z.cols() != centroids.cols() {
        return Err(Error::dim("soft_assign", z.shape(), centroids.shape()));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// `q_ij ∝ (1 + ‖z_i − u_j‖²/α)^(−(α+1)/2)`, normalized per row.
pub fn soft_assign(z: &Matrix, centroids: &Matrix, alpha: f64) -> Result<SoftAssignment> {
    check_head(z, centroids, alpha)?;
    let k = centroids.rows();
    let expo = -(alpha + 1.0) / 2.0;
    let mut q = Matrix::zeros(z.rows(), k);
    let mut logk = vec![0.0; k];
    for i in 0..z.rows() {
        let zi = z.row(i);
        for (j, lk) in logk.iter_mut().enumerate() {
            let d = squared_distance(zi, centroids.row(j)).max(0.0);
            *lk = expo * (d / alpha).ln_1p();
        }
        let max = logk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = q.row_mut(i);
        let mut total = 0.0;
        for (o, &lk) in row.iter_mut().zip(&logk) {
            *o = (lk - max).exp();
            total += *o;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(SoftAssignment { q, alpha })
}

/// `p_ij ∝ q_ij^s / f_j` with `f_j = Σ_i q_ij`, normalized per row.
pub fn target_distribution(q: &SoftAssignment, s: f64) -> Result<TargetDistribution> {
    if !(s >= 1.0) {
        return Err(Error::invalid(format!("sharpening exponent s must be >= 1, got {s}")));
    }
    let frequencies = q.q.col_sums();
    if let Some(cluster) = frequencies.iter().position(|&f| !(f > 0.0)) {
        return Err(Error::DegenerateCluster { cluster });
    }
    let mut p = Matrix::zeros(q.q.rows(), q.q.cols());
    for i in 0..q.q.rows() {
        let row = p.row_mut(i);
        let mut total = 0.0;
        for ((o, &qij), &f) in row.iter_mut().zip(q.q.row(i)).zip(&frequencies) {
            *o = qij.powf(s) / f;
            total += *o;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(TargetDistribution { p, s, frequencies })
}

/// `Σ_i Σ_j p_ij log(p_ij / q_ij)` with `0·log(0/·) = 0`.
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::dim("kl_divergence", p.shape(), q.shape()));
    }
    let mut total = 0.0;
    for i in 0..p.rows() {
        for (j, (&pij, &qij)) in p.row(i).iter().zip(q.row(i)).enumerate() {
            if pij > 0.0 {
                if !(qij > 0.0) {
                    return Err(Error::InfiniteDivergence { row: i, col: j });
                }
                total += pij * (pij / qij).ln();
            }
        }
    }
    Ok(total)
}

/// Gradients of `scale · Σ_i −Σ_j w_ij log q_ij(z, u)` where `q` is the
/// soft assignment already computed from `(z, u)`. With `w = p` this is the
/// gradient of KL(P‖Q) for a constant P.
pub fn cross_entropy_grads(
    z: &Matrix,
    centroids: &Matrix,
    q: &SoftAssignment,
    weights: &Matrix,
    scale: f64,
) -> Result<(Matrix, Matrix)> {
    check_head(z, centroids, q.alpha)?;
    if q.q.shape() != (z.rows(), centroids.rows()) {
        return Err(Error::dim("cross_entropy_grads", q.q.shape(), (z.rows(), centroids.rows())));
    }
    if weights.shape() != q.q.shape() {
        return Err(Error::dim("cross_entropy_grads", weights.shape(), q.q.shape()));
    }
    let alpha = q.alpha;
    let c = (alpha + 1.0) / alpha;
    let dim = z.cols();
    let mut grad_z = Matrix::zeros(z.rows(), dim);
    let mut grad_u = Matrix::zeros(centroids.rows(), dim);
    for i in 0..z.rows() {
        let zi = z.row(i);
        let wsum: f64 = weights.row(i).iter().sum();
        for j in 0..centroids.rows() {
            let uj = centroids.row(j);
            let d = squared_distance(zi, uj).max(0.0);
            let coef = scale * c * (weights.get(i, j) - q.q.get(i, j) * wsum) / (1.0 + d / alpha);
            if coef == 0.0 {
                continue;
            }
            for t in 0..dim {
                let g = coef * (zi[t] - uj[t]);
                grad_z.row_mut(i)[t] += g;
                grad_u.row_mut(j)[t] -= g;
            }
        }
    }
    Ok((grad_z, grad_u))
}

/// Gradients of `KL(P‖Q)` (summed over rows) w.r.t. `z` and the centroids, P held fixed.
pub fn grad_ld(z: &Matrix, centroids: &Matrix, p: &Matrix, alpha: f64) -> Result<(Matrix, Matrix)> {
    let q = soft_assign(z, centroids, alpha)?;
    cross_entropy_grads(z, centroids, &q, p, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_point_splits_evenly() {
        let z = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let u = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let q = soft_assign(&z, &u, ALPHA).unwrap();
        assert_eq!(q.q.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn hand_evaluated_kernel() {
        // Kernels 1 and 1/2 → [2/3, 1/3].
        let z = Matrix::from_rows(&[[0.0]]).unwrap();
        let u = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let q = soft_assign(&z, &u, 1.0).unwrap();
        assert!((q.q.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.q.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_centroid_gives_certainty() {
        let z = Matrix::from_rows(&[[3.0, -1.0], [0.2, 0.1]]).unwrap();
        let u = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let q = soft_assign(&z, &u, 1.0).unwrap();
        assert_eq!(q.q.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn soft_assign_errors() {
        let z = Matrix::zeros(2, 3);
        assert!(soft_assign(&z, &Matrix::zeros(2, 2), 1.0).is_err());
        assert!(soft_assign(&z, &Matrix::zeros(0, 3), 1.0).is_err());
    }

    #[test]
    fn hand_evaluated_target() {
        let q = SoftAssignment {
            q: Matrix::from_rows(&[[0.8, 0.2], [0.2, 0.8]]).unwrap(),
            alpha: 1.0,
        };
        let t = target_distribution(&q, 2.0).unwrap();
        assert_eq!(t.frequencies, vec![1.0, 1.0]);
        // [0.64, 0.04] / 0.68
        assert!((t.p.get(0, 0) - 0.64 / 0.68).abs() < 1e-12);
        assert!((t.p.get(0, 1) - 0.04 / 0.68).abs() < 1e-12);
        assert!((t.p.get(0, 0) - 0.9412).abs() < 5e-5);
    }

    #[test]
    fn uniform_and_identity_targets() {
        let q = SoftAssignment {
            q: Matrix::filled(3, 4, 0.25),
            alpha: 1.0,
        };
        let t = target_distribution(&q, 2.0).unwrap();
        assert!(t.p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let q = SoftAssignment {
            q: Matrix::from_rows(&[[0.7, 0.3], [0.3, 0.7]]).unwrap(),
            alpha: 1.0,
        };
        let t = target_distribution(&q, 1.0).unwrap();
        for (a, b) in t.p.as_slice().iter().zip(q.q.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_soft_cluster_is_degenerate() {
        let q = SoftAssignment {
            q: Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap(),
            alpha: 1.0,
        };
        assert!(matches!(target_distribution(&q, 2.0), Err(Error::DegenerateCluster { cluster: 1 })));
        assert!(target_distribution(&q, 0.5).is_err());
    }

    #[test]
    fn kl_cases() {
        let p = Matrix::from_rows(&[[0.3, 0.7]]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let p = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            kl_divergence(&q, &p),
            Err(Error::InfiniteDivergence { row: 0, col: 1 })
        ));
    }

    #[test]
    fn gradient_vanishes_when_p_equals_q() {
        let z = Matrix::from_rows(&[[0.1, 0.4], [1.2, -0.3], [-0.5, 0.9]]).unwrap();
        let u = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.5]]).unwrap();
        let q = soft_assign(&z, &u, 1.0).unwrap();
        let (gz, gu) = grad_ld(&z, &u, &q.q, 1.0).unwrap();
        assert!(gz.as_slice().iter().chain(gu.as_slice()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn translation_leaves_grad_z_unchanged() {
        let z = Matrix::from_rows(&[[0.25, 0.5], [1.0, -0.75]]).unwrap();
        let u = Matrix::from_rows(&[[0.0, 0.0], [1.5, 0.5]]).unwrap();
        let p = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
        let shift = |m: &Matrix| m.map(|v| v + 4.0);
        let (gz, _) = grad_ld(&z, &u, &p, 1.0).unwrap();
        let (gz2, _) = grad_ld(&shift(&z), &shift(&u), &p, 1.0).unwrap();
        assert_eq!(gz, gz2);
    }
}
