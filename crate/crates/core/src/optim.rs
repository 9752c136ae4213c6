//! Adam with bias correction, and the per-epoch exponential learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `lr(epoch) = lr0 · exp(−decay · epoch)`, epoch counted from 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr0: 1e-3,
            decay: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn new(lr0: f64, decay: f64) -> Result<Self> {
        if !(lr0 > 0.0 && lr0.is_finite()) || !(decay > 0.0 && decay.is_finite()) {
            return Err(Error::Usage(format!(
                "learning rate schedule needs lr0 > 0 and decay > 0 (got {lr0}, {decay})"
            )));
        }
        Ok(LrSchedule { lr0, decay })
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * (-self.decay * epoch as f64).exp()
    }
}

pub fn lr_at_epoch(sched: &LrSchedule, epoch: usize) -> f64 {
    sched.lr_at_epoch(epoch)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self::with_hyper(params, AdamHyper::default())
    }

    pub fn with_hyper<'a>(
        params: impl IntoIterator<Item = &'a Tensor<T>>,
        hyper: AdamHyper,
    ) -> Self {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            hyper,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One Adam update of every parameter.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.expect_same_shape(g)?;
            p.expect_same_shape(m)?;
        }

        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let cast = T::from_f64_lossy;
        let (b1, b2, one) = (cast(beta1), cast(beta2), T::one());
        // θ -= lr/bc1 · m / (sqrt(v/bc2) + ε)
        let step = cast(lr / bc1);
        let inv_bc2 = cast(1.0 / bc2);
        let eps = cast(eps);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((theta, &g), m), v) in iter {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *theta -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}
