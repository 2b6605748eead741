//! SGD with classical momentum and Adam, over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerSpec {
    pub const fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerSpec::SgdMomentum { lr, momentum }
    }

    pub const fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerSpec::SgdMomentum { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    spec: OptimizerSpec,
    step: u64,
    /// Velocity (SGD) or first moment (Adam), one buffer per parameter tensor.
    first: Vec<Vec<f64>>,
    /// Second moment, Adam only.
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec) -> Self {
        OptimizerState {
            spec,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn spec(&self) -> OptimizerSpec {
        self.spec
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Buffers are sized on the first call; later calls
    /// must present the same parameter layout.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer_step", (params.len(), 0), (grads.len(), 0)));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::dim("optimizer_step", (i, p.len()), (i, g.len())));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.spec, OptimizerSpec::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(b, p)| b.len() != p.len())
        {
            return Err(Error::invalid("parameter layout changed between optimizer steps"));
        }
        self.step += 1;
        match self.spec {
            OptimizerSpec::SgdMomentum { lr, momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((p, &g), v) in p.iter_mut().zip(*g).zip(v.iter_mut()) {
                        *v = momentum * *v - lr * g;
                        *p += *v;
                    }
                }
            }
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((p, &g), m), v) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
