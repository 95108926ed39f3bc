use crate::tensor::{Real, Tensor};

use super::{Result, TrainError};

/// Adadelta with per-element running averages of squared gradients and
/// squared updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta<T> {
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: Vec<Tensor<T>>,
    pub sq_update: Vec<Tensor<T>>,
}

impl<T: Real> Adadelta<T> {
    pub fn new(params: &[Tensor<T>], rho: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adadelta {
            rho,
            eps,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    /// `E[g²] ← ρE[g²] + (1−ρ)g²`, `Δx = −√(E[Δx²]+ε)/√(E[g²]+ε)·g`,
    /// `E[Δx²] ← ρE[Δx²] + (1−ρ)Δx²`, `x ← x + Δx`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.sq_grad.len() || grads.len() != params.len() {
            return Err(TrainError::Config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.sq_grad.len(),
                params.len(),
                grads.len()
            )));
        }
        let (rho, eps) = (T::lit(self.rho), T::lit(self.eps));
        let one_m = T::one() - rho;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.sq_grad[i].shape() {
                return Err(TrainError::Config(format!(
                    "shape mismatch for parameter {i}: {:?} vs {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let eg = self.sq_grad[i].data_mut();
            let ex = self.sq_update[i].data_mut();
            for (((x, &g), eg), ex) in p.data_mut().iter_mut().zip(g.data()).zip(eg).zip(ex) {
                *eg = rho * *eg + one_m * g * g;
                let dx = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * g;
                *ex = rho * *ex + one_m * dx * dx;
                *x += dx;
            }
        }
        Ok(())
    }
}
