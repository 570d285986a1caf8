//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam optimizer state over a fixed list of parameter tensors.
///
/// Moment buffers are allocated lazily on the first call to
/// [`Adam::step`] and must see the same parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    /// Learning rate must be positive; betas must lie in `[0, 1)`;
    /// epsilon must be positive.
    pub fn new(lr: S, beta1: S, beta2: S, eps: S) -> Result<Self> {
        if !(lr > S::zero()) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {lr}"
            )));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b >= S::zero() && b < S::one()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(eps > S::zero()) || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive and finite, got {eps}"
            )));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update in place:
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter shape {:?} does not match gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            g.validate_finite("gradient")?;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::ShapeMismatch(
                "parameter list changed between optimizer steps".into(),
            ));
        }

        self.t += 1;
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
