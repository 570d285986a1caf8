//! Adversarial training objectives.
//!
//! The generator minimizes a non-saturating adversarial term plus an
//! L1 reconstruction term:
//!
//! ```text
//! L_G = mean(-log D(x, G(x, z))) + lambda * mean(|y - G(x, z)|)
//! ```
//!
//! The discriminator minimizes the negative log-likelihood of telling
//! real pairs from generated ones:
//!
//! ```text
//! L_D = mean(-log D(x, y)) + mean(-log(1 - D(x, G(x, z))))
//! ```
//!
//! All means are per-element (L1 over every pixel, adversarial terms
//! over the batch). Logarithms are clamped at a small positive epsilon
//! so saturated discriminator scores cannot produce infinities.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Weights and guards for the two objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the L1 reconstruction term; must be finite and >= 0.
    pub lambda_l1: f64,
    /// Positive floor applied inside every logarithm, at most 1e-6.
    pub epsilon_log: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 100.0,
            epsilon_log: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_l1.is_finite() || self.lambda_l1 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_l1 must be finite and >= 0, got {}",
                self.lambda_l1
            )));
        }
        if !(self.epsilon_log > 0.0 && self.epsilon_log <= 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_log must be in (0, 1e-6], got {}",
                self.epsilon_log
            )));
        }
        Ok(())
    }
}

fn check_scores<S: Scalar>(tape: &Tape<S>, scores: Var, what: &str) -> Result<()> {
    let t = tape.value(scores)?;
    for &v in t.data() {
        if !(v >= S::zero() && v <= S::one()) {
            return Err(Error::InvalidArgument(format!(
                "{what} score {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Generator objective on an already-recorded graph.
///
/// `d_fake` holds discriminator scores for the generated masks (any
/// shape, values in `[0, 1]`), `fake` the generated masks, and `real`
/// the ground-truth masks of identical shape. The result is a `[1]`
/// scalar on the same tape, so one backward pass reaches the generator
/// parameters through both terms.
pub fn generator_loss<S: Scalar>(
    tape: &mut Tape<S>,
    d_fake: Var,
    fake: Var,
    real: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_scores(tape, d_fake, "discriminator")?;
    if tape.value(fake)?.shape() != tape.value(real)?.shape() {
        return Err(Error::ShapeMismatch(format!(
            "generated mask shape {:?} does not match target {:?}",
            tape.value(fake)?.shape(),
            tape.value(real)?.shape()
        )));
    }
    let eps = S::from_f64(cfg.epsilon_log);
    let log_d = tape.ln_clamped(d_fake, eps)?;
    let neg_log_d = tape.affine(log_d, -S::one(), S::zero())?;
    let adv = tape.mean_all(neg_log_d)?;

    let diff = tape.sub(real, fake)?;
    let abs_diff = tape.abs(diff)?;
    let l1 = tape.mean_all(abs_diff)?;
    let weighted = tape.affine(l1, S::from_f64(cfg.lambda_l1), S::zero())?;
    tape.add(adv, weighted)
}

/// Discriminator objective on an already-recorded graph.
///
/// `d_real` and `d_fake` hold scores in `[0, 1]` for real and generated
/// pairs. Callers must record the generated masks as constants here so
/// this loss trains the discriminator alone.
pub fn discriminator_loss<S: Scalar>(
    tape: &mut Tape<S>,
    d_real: Var,
    d_fake: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_scores(tape, d_real, "real-pair")?;
    check_scores(tape, d_fake, "fake-pair")?;
    let eps = S::from_f64(cfg.epsilon_log);

    let log_real = tape.ln_clamped(d_real, eps)?;
    let neg_log_real = tape.affine(log_real, -S::one(), S::zero())?;
    let real_term = tape.mean_all(neg_log_real)?;

    let one_minus = tape.affine(d_fake, -S::one(), S::one())?;
    let log_fake = tape.ln_clamped(one_minus, eps)?;
    let neg_log_fake = tape.affine(log_fake, -S::one(), S::zero())?;
    let fake_term = tape.mean_all(neg_log_fake)?;

    tape.add(real_term, fake_term)
}
