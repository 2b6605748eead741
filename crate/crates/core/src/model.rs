//! The clustering network: encoder followed by the Student-t clustering head.

use crate::dec::{self, SoftAssignment};
use crate::error::Result;
use crate::network::{Network, NetworkGrads};
use crate::tensor::Matrix;
use crate::vat::VatModel;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub encoder: Network,
    /// `K × latent_dim`
    pub centroids: Matrix,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGrads {
    pub encoder: NetworkGrads,
    pub centroids: Matrix,
}

impl ClusterGrads {
    pub fn add_scaled(&mut self, other: &ClusterGrads, s: f64) -> Result<()> {
        self.encoder.add_scaled(&other.encoder, s)?;
        self.centroids.add_scaled(&other.centroids, s)
    }

    /// Layout matches [`ClusterModel::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.slices();
        out.push(self.centroids.as_slice());
        out
    }
}

/// Output of one forward pass plus the requested gradients.
pub(crate) struct Backprop {
    pub q: SoftAssignment,
    pub input_grad: Option<Matrix>,
    pub grads: Option<ClusterGrads>,
}

impl ClusterModel {
    pub fn new(encoder: Network, centroids: Matrix) -> Self {
        ClusterModel {
            encoder,
            centroids,
            alpha: dec::ALPHA,
        }
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.forward(x)
    }

    pub fn soft_assign(&self, x: &Matrix) -> Result<SoftAssignment> {
        dec::soft_assign(&self.embed(x)?, &self.centroids, self.alpha)
    }

    /// Encoder parameters followed by the centroid buffer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.params_mut();
        out.push(self.centroids.as_mut_slice());
        out
    }

    /// Forward pass and backpropagation of `scale · Σ_i −Σ_j w_ij log q_ij`.
    pub(crate) fn backprop(&self, x: &Matrix, weights: &Matrix, scale: f64, with_params: bool, with_input: bool) -> Result<Backprop> {
        let (z, trace) = self.encoder.forward_trace(x)?;
        let q = dec::soft_assign(&z, &self.centroids, self.alpha)?;
        let (grad_z, grad_u) = dec::cross_entropy_grads(&z, &self.centroids, &q, weights, scale)?;
        let (input_grad, enc) = self.encoder.backward(&trace, &grad_z, with_params, with_input)?;
        Ok(Backprop {
            q,
            input_grad,
            grads: enc.map(|encoder| ClusterGrads {
                encoder,
                centroids: grad_u,
            }),
        })
    }
}

impl VatModel for ClusterModel {
    type Grads = ClusterGrads;

    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.soft_assign(x)?.q)
    }

    fn cross_entropy_input_grad(&self, x: &Matrix, weights: &Matrix) -> Result<Matrix> {
        let bp = self.backprop(x, weights, 1.0, false, true)?;
        Ok(bp.input_grad.expect("input gradient requested"))
    }

    fn cross_entropy_param_grads(&self, x: &Matrix, weights: &Matrix, scale: f64) -> Result<(Matrix, ClusterGrads)> {
        let bp = self.backprop(x, weights, scale, true, false)?;
        Ok((bp.q.q, bp.grads.expect("parameter gradients requested")))
    }
}
