//! Pixel-level segmentation metrics.
//!
//! Masks are tensors whose elements are exactly 0.0 or 1.0. Counts pool
//! across whole tensors (micro-averaging); zero-denominator metrics
//! evaluate to 1.0 and are flagged as vacuous rather than poisoning
//! averages with NaN.

use crate::error::{Error, Result};
use crate::tensor::Tensor as GenericTensor;

type Tensor = GenericTensor<f64>;

/// Pixel confusion counts between a predicted and a true binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// Pools another tensor's counts into this one.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

/// Which metrics had a zero denominator (and were reported as 1.0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VacuousFlags {
    pub dice: bool,
    pub jaccard: bool,
    pub sensitivity: bool,
    pub specificity: bool,
}

/// Scalar metrics derived from confusion counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub accuracy: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub vacuous: VacuousFlags,
}

fn ensure_binary(t: &Tensor, what: &str) -> Result<()> {
    for (i, &v) in t.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "{what} is not binary: element {i} is {v}"
            )));
        }
    }
    Ok(())
}

/// Counts agreement between two binary masks of identical shape.
pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction shape {:?} does not match truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    ensure_binary(pred, "prediction")?;
    ensure_binary(truth, "truth")?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Derives all metrics from pooled counts. The total must be positive.
pub fn metrics(c: &ConfusionCounts) -> Result<SegMetrics> {
    if c.total() == 0 {
        return Err(Error::InvalidArgument(
            "metrics need at least one counted pixel".into(),
        ));
    }
    let mut flags = VacuousFlags::default();
    let accuracy = (c.true_pos + c.true_neg) as f64 / c.total() as f64;
    let dice = ratio(
        2 * c.true_pos,
        2 * c.true_pos + c.false_pos + c.false_neg,
        &mut flags.dice,
    );
    let jaccard = ratio(
        c.true_pos,
        c.true_pos + c.false_pos + c.false_neg,
        &mut flags.jaccard,
    );
    let sensitivity = ratio(c.true_pos, c.true_pos + c.false_neg, &mut flags.sensitivity);
    let specificity = ratio(c.true_neg, c.true_neg + c.false_pos, &mut flags.specificity);
    Ok(SegMetrics {
        accuracy,
        dice,
        jaccard,
        sensitivity,
        specificity,
        vacuous: flags,
    })
}

/// Pools confusion counts over paired mask lists.
pub fn pooled_confusion(preds: &[Tensor], truths: &[Tensor]) -> Result<ConfusionCounts> {
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions but {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one pair".into(),
        ));
    }
    let mut pooled = ConfusionCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        pooled.merge(&confusion(p, t)?);
    }
    Ok(pooled)
}

/// Micro-averaged metrics: counts pooled over the whole set first.
pub fn evaluate_set(preds: &[Tensor], truths: &[Tensor]) -> Result<SegMetrics> {
    metrics(&pooled_confusion(preds, truths)?)
}

/// Per-pair (macro) metrics, one entry per mask pair.
pub fn evaluate_each(preds: &[Tensor], truths: &[Tensor]) -> Result<Vec<SegMetrics>> {
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions but {} truths",
            preds.len(),
            truths.len()
        )));
    }
    preds
        .iter()
        .zip(truths)
        .map(|(p, t)| metrics(&confusion(p, t)?))
        .collect()
}
