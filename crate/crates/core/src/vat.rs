//! Virtual adversarial perturbations found by power iteration, and the
//! VAT consistency loss KL[Q(x) ‖ Q(x + r_adv)].

use rand_distr::{Distribution, StandardNormal};

use crate::dec;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VatConfig {
    /// Perturbation radius, in input units.
    pub epsilon: f64,
    /// Probe scale used while estimating the adversarial direction.
    pub xi: f64,
    /// Number of power iterations.
    pub power_iterations: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        VatConfig {
            epsilon: 1.0,
            xi: 10.0,
            power_iterations: 1,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.xi > 0.0) || self.power_iterations == 0 {
            return Err(Error::Config(format!(
                "VAT needs epsilon > 0, xi > 0 and at least one power iteration, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A model mapping inputs to per-row categorical distributions, with the
/// derivatives VAT needs. "Cross-entropy" below is `Σ_i −Σ_j w_ij log q_ij(x)`.
pub trait VatModel {
    type Grads;

    fn predict(&self, x: &Matrix) -> Result<Matrix>;

    /// Gradient of the weighted cross-entropy w.r.t. the input rows.
    fn cross_entropy_input_grad(&self, x: &Matrix, weights: &Matrix) -> Result<Matrix>;

    /// Gradient of `scale ·` weighted cross-entropy w.r.t. the model parameters,
    /// returned with the prediction at `x`.
    fn cross_entropy_param_grads(&self, x: &Matrix, weights: &Matrix, scale: f64) -> Result<(Matrix, Self::Grads)>;
}

/// Adversarial input offsets, one row per input row, each of norm ε.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub r_adv: Matrix,
}

fn normalize_rows(m: &mut Matrix) -> Vec<bool> {
    (0..m.rows())
        .map(|i| {
            let row = m.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                row.iter_mut().for_each(|v| *v /= norm);
                true
            } else {
                false
            }
        })
        .collect()
}

/// Unit-norm Gaussian direction per row.
pub fn random_directions(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut d = Matrix::zeros(rows, cols);
    for i in 0..rows {
        loop {
            d.row_mut(i)
                .iter_mut()
                .for_each(|v| *v = StandardNormal.sample(&mut *rng));
            let norm: f64 = d.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                d.row_mut(i).iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    d
}

/// Power-iteration estimate of `argmax_{‖r‖≤ε} KL[q_ref ‖ Q(x + r)]`, row by row.
///
/// Each row starts from a random unit direction `d`; each iteration replaces
/// `d` by the normalized gradient of the KL at `x + ξ·d`. Rows whose gradient
/// vanishes keep their current direction.
pub fn compute_radv<M: VatModel>(model: &M, x: &Matrix, q_ref: &Matrix, cfg: &VatConfig, rng: &mut Rng) -> Result<Perturbation> {
    cfg.validate()?;
    if q_ref.rows() != x.rows() {
        return Err(Error::dim("compute_radv", x.shape(), q_ref.shape()));
    }
    let mut d = random_directions(x.rows(), x.cols(), rng);
    for _ in 0..cfg.power_iterations {
        let mut probe = x.clone();
        probe.add_scaled(&d, cfg.xi)?;
        let mut g = model.cross_entropy_input_grad(&probe, q_ref)?;
        let moved = normalize_rows(&mut g);
        for (i, ok) in moved.into_iter().enumerate() {
            if ok {
                d.row_mut(i).copy_from_slice(g.row(i));
            }
        }
    }
    Ok(Perturbation {
        r_adv: d.scale(cfg.epsilon),
    })
}

/// Mean over rows of `KL[q_ref ‖ Q(x + r_adv)]` with `q_ref` held constant,
/// and the parameter gradients through the perturbed branch.
pub fn vat_loss_against<M: VatModel>(model: &M, x: &Matrix, r_adv: &Perturbation, q_ref: &Matrix) -> Result<(f64, M::Grads)> {
    if r_adv.r_adv.shape() != x.shape() {
        return Err(Error::dim("vat_loss", x.shape(), r_adv.r_adv.shape()));
    }
    let scale = 1.0 / x.rows().max(1) as f64;
    let perturbed = x.add(&r_adv.r_adv)?;
    let (q_adv, grads) = model.cross_entropy_param_grads(&perturbed, q_ref, scale)?;
    let loss = dec::kl_divergence(q_ref, &q_adv)? * scale;
    Ok((loss.max(0.0), grads))
}

/// [`vat_loss_against`] with the clean prediction computed from `x`.
pub fn vat_loss<M: VatModel>(model: &M, x: &Matrix, r_adv: &Perturbation) -> Result<(f64, M::Grads)> {
    let q_ref = model.predict(x)?;
    vat_loss_against(model, x, r_adv, &q_ref)
}
