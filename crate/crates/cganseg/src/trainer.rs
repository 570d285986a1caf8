//! Training loops: alternating adversarial optimization for the
//! segmentation network pair, supervised cross-validated training for
//! the shape classifier, and thresholded generator inference.
//!
//! Determinism contract: given a fixed config (including seed), every
//! run produces bit-identical weights and reports. All randomness flows
//! from three seeded streams (generator init, discriminator init, and
//! one loop stream driving batch order plus dropout), batches are
//! visited sequentially, and accumulation order is fixed.

use crate::checkpoint::save_weights;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_loss, LossConfig};
use crate::metrics::{evaluate_set, SegMetrics};
use crate::nets::{
    bind, build, discriminator_forward, generator_forward, generator_infer,
    shape_cnn_logits, NetworkSpec, Variant,
};
use crate::shape_analysis::{classify_shapes, shape_accuracy, ShapeLabel};
use crate::tensor::stack;
use crate::{Adam, Tape, Tensor, Weights};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Adam epsilon used by every optimizer in the crate.
const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters for adversarial segmentation training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Generator architecture; the discriminator is fixed.
    pub variant: Variant,
    pub resolution: usize,
    pub depth: usize,
    pub base_channels: usize,
    /// Emit epoch checkpoints every this many epochs; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            loss: LossConfig::default(),
            seed: 42,
            variant: Variant::GenUnet,
            resolution: 64,
            depth: 4,
            base_channels: 8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !self.variant.is_generator() {
            return Err(Error::InvalidArgument(format!(
                "adversarial training needs a generator variant, got {}",
                self.variant
            )));
        }
        self.loss.validate()?;
        self.generator_spec()?;
        self.discriminator_spec()?;
        Ok(())
    }

    pub fn generator_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(
            self.variant,
            self.resolution,
            self.depth,
            self.base_channels,
        )
    }

    pub fn discriminator_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(
            Variant::Discriminator,
            self.resolution,
            self.depth,
            self.base_channels,
        )
    }
}

/// Losses and validation scores for one completed epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Sample-weighted mean generator loss over the epoch.
    pub g_loss: f64,
    /// Sample-weighted mean discriminator loss over the epoch.
    pub d_loss: f64,
    /// Pooled validation Dice; absent when no validation set is given.
    pub val_dice: Option<f64>,
    /// Pooled validation Jaccard; absent without a validation set.
    pub val_jaccard: Option<f64>,
    /// Wall-clock seconds; informational only, never written to
    /// reports so artifacts stay byte-reproducible.
    pub wall_secs: f64,
}

/// One record per completed epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// CSV rendering (epoch, losses, validation scores). Wall-clock is
    /// deliberately excluded to keep reruns byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,g_loss,d_loss,val_dice,val_jaccard\n");
        for e in &self.epochs {
            let dice = e.val_dice.map(|v| v.to_string()).unwrap_or_default();
            let jac = e.val_jaccard.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", e.epoch, e.g_loss, e.d_loss, dice, jac)
                .expect("string write");
        }
        out
    }
}

/// Everything produced by an adversarial training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Generator weights after the final epoch.
    pub generator: Weights,
    /// Discriminator weights after the final epoch.
    pub discriminator: Weights,
    /// Generator snapshot from the best validation-Dice epoch; equals
    /// the final weights when no validation set was supplied.
    pub best_generator: Weights,
    /// Epoch (1-based) the best snapshot came from.
    pub best_epoch: Option<usize>,
    pub report: TrainReport,
}

/// Tags step-level numeric failures with their epoch and batch.
fn with_step(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) | Error::NonFinite(m) => Error::Numeric(format!(
            "epoch {epoch}, batch {batch}: {m}"
        )),
        other => other,
    }
}

/// One discriminator update: minimizes the adversarial objective on a
/// real pair and a generated pair, with the generator bound as
/// constants so its weights cannot receive gradients.
fn d_step(
    g_weights: &Weights,
    d_weights: &mut Weights,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    loss_cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let g_net = bind(&mut tape, g_weights, false)?;
    let d_net = bind(&mut tape, d_weights, true)?;
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    let fake = generator_forward(&mut tape, &g_net, xv, Some(rng))?;
    let d_real = discriminator_forward(&mut tape, &d_net, xv, yv)?;
    let d_fake = discriminator_forward(&mut tape, &d_net, xv, fake)?;
    let loss = discriminator_loss(&mut tape, d_real, d_fake, loss_cfg)?;
    let loss_value = tape.value(loss)?.item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite discriminator loss {loss_value}"
        )));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor> = d_net
        .vars()
        .iter()
        .map(|&v| tape.grad(v))
        .collect::<Result<_>>()?;
    opt.step(d_weights.tensors_mut(), &grads)?;
    Ok(loss_value)
}

/// One generator update: minimizes adversarial + weighted L1 loss with
/// the (already updated) discriminator bound as constants.
fn g_step(
    g_weights: &mut Weights,
    d_weights: &Weights,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    loss_cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let g_net = bind(&mut tape, g_weights, true)?;
    let d_net = bind(&mut tape, d_weights, false)?;
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    let fake = generator_forward(&mut tape, &g_net, xv, Some(rng))?;
    let d_fake = discriminator_forward(&mut tape, &d_net, xv, fake)?;
    let loss = generator_loss(&mut tape, d_fake, fake, yv, loss_cfg)?;
    let loss_value = tape.value(loss)?.item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite generator loss {loss_value}"
        )));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor> = g_net
        .vars()
        .iter()
        .map(|&v| tape.grad(v))
        .collect::<Result<_>>()?;
    opt.step(g_weights.tensors_mut(), &grads)?;
    Ok(loss_value)
}

/// Pooled segmentation metrics of a generator over labeled pairs:
/// inference with dropout disabled, thresholding at 0.5, confusion
/// counts pooled across the whole set.
pub fn evaluate_generator(
    weights: &Weights,
    pairs: &[SamplePair],
) -> Result<SegMetrics> {
    let preds: Vec<Tensor> = pairs
        .iter()
        .map(|s| segment(weights, &s.image, 0.5))
        .collect::<Result<_>>()?;
    let truths: Vec<Tensor> = pairs.iter().map(|s| s.mask.clone()).collect();
    evaluate_set(&preds, &truths)
}

fn check_resolution(samples: &[SamplePair], expected: usize) -> Result<()> {
    for s in samples {
        if s.resolution() != expected {
            return Err(Error::ShapeMismatch(format!(
                "sample '{}' has resolution {}, config expects {expected}",
                s.id,
                s.resolution()
            )));
        }
    }
    Ok(())
}

fn stack_batch(
    samples: &[SamplePair],
    chunk: &[usize],
) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> =
        chunk.iter().map(|&i| samples[i].image.clone()).collect();
    let masks: Vec<Tensor> =
        chunk.iter().map(|&i| samples[i].mask.clone()).collect();
    Ok((stack(&images)?, stack(&masks)?))
}

/// Adversarial training from freshly initialized weights.
///
/// Per batch the loop takes one discriminator step on (real, generated)
/// pairs with generator outputs treated as constants, then one
/// generator step with discriminator weights frozen. When a checkpoint
/// directory is supplied, the schedule writes `gen_epoch_NNNN.ckpt` /
/// `disc_epoch_NNNN.ckpt` every `checkpoint_every` epochs, plus
/// `gen_final.ckpt`, `disc_final.ckpt` and `gen_best.ckpt` at the end.
pub fn train_cgan(
    train: &[SamplePair],
    val: &[SamplePair],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let generator = build::<f64>(&cfg.generator_spec()?, cfg.seed)?;
    let discriminator =
        build::<f64>(&cfg.discriminator_spec()?, cfg.seed.wrapping_add(1))?;
    train_cgan_from(generator, discriminator, train, val, cfg, checkpoint_dir)
}

/// Adversarial training from caller-supplied starting weights (resume
/// support). Specs must match the config.
pub fn train_cgan_from(
    mut generator: Weights,
    mut discriminator: Weights,
    train: &[SamplePair],
    val: &[SamplePair],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "training set must be nonempty".into(),
        ));
    }
    check_resolution(train, cfg.resolution)?;
    check_resolution(val, cfg.resolution)?;
    if *generator.spec() != cfg.generator_spec()? {
        return Err(Error::InvalidArgument(
            "generator weights do not match the training config".into(),
        ));
    }
    if *discriminator.spec() != cfg.discriminator_spec()? {
        return Err(Error::InvalidArgument(
            "discriminator weights do not match the training config".into(),
        ));
    }
    if cfg.checkpoint_every > 0 && checkpoint_dir.is_none() {
        return Err(Error::InvalidArgument(
            "checkpoint_every > 0 needs a checkpoint directory".into(),
        ));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut adam_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, ADAM_EPS)?;
    let mut adam_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, ADAM_EPS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut report = TrainReport::default();
    let mut best: Option<(usize, f64, Weights)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut g_sum = 0.0;
        let mut d_sum = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = stack_batch(train, chunk)?;
            let d_loss = d_step(
                &generator,
                &mut discriminator,
                &mut adam_d,
                &x,
                &y,
                &cfg.loss,
                &mut rng,
            )
            .map_err(|e| with_step(e, epoch, batch + 1))?;
            let g_loss = g_step(
                &mut generator,
                &discriminator,
                &mut adam_g,
                &x,
                &y,
                &cfg.loss,
                &mut rng,
            )
            .map_err(|e| with_step(e, epoch, batch + 1))?;
            let weight = chunk.len() as f64;
            d_sum += d_loss * weight;
            g_sum += g_loss * weight;
        }
        let n = train.len() as f64;
        let (val_dice, val_jaccard) = if val.is_empty() {
            (None, None)
        } else {
            let m = evaluate_generator(&generator, val)?;
            (Some(m.dice), Some(m.jaccard))
        };
        if let Some(dice) = val_dice {
            let improved = match &best {
                Some((_, best_dice, _)) => dice > *best_dice,
                None => true,
            };
            if improved {
                best = Some((epoch, dice, generator.clone()));
            }
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_weights(
                    &generator,
                    &dir.join(format!("gen_epoch_{epoch:04}.ckpt")),
                )?;
                save_weights(
                    &discriminator,
                    &dir.join(format!("disc_epoch_{epoch:04}.ckpt")),
                )?;
            }
        }
        report.epochs.push(EpochStats {
            epoch,
            g_loss: g_sum / n,
            d_loss: d_sum / n,
            val_dice,
            val_jaccard,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }

    let (best_epoch, best_generator) = match best {
        Some((epoch, _, weights)) => (Some(epoch), weights),
        None => (None, generator.clone()),
    };
    if let Some(dir) = checkpoint_dir {
        save_weights(&generator, &dir.join("gen_final.ckpt"))?;
        save_weights(&discriminator, &dir.join("disc_final.ckpt"))?;
        save_weights(&best_generator, &dir.join("gen_best.ckpt"))?;
    }
    Ok(TrainOutcome {
        generator,
        discriminator,
        best_generator,
        best_epoch,
        report,
    })
}

/// Generator inference followed by thresholding. Accepts `[R, R]`,
/// `[1, R, R]` or `[n, 1, R, R]` inputs and mirrors the input shape.
pub fn segment(weights: &Weights, image: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "segmentation threshold must lie strictly inside (0, 1), got \
             {threshold}"
        )));
    }
    if !weights.spec().variant.is_generator() {
        return Err(Error::InvalidArgument(format!(
            "segment needs generator weights, got {}",
            weights.spec().variant
        )));
    }
    let original = image.shape().to_vec();
    let batched = match original[..] {
        [h, w] => image.reshape(&[1, 1, h, w])?,
        [1, h, w] => image.reshape(&[1, 1, h, w])?,
        [_, 1, _, _] => image.clone(),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "segment expects [R, R], [1, R, R] or [n, 1, R, R], got {:?}",
                original
            )))
        }
    };
    let res = weights.spec().input_resolution;
    if batched.shape()[2] != res || batched.shape()[3] != res {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{} but the weights were trained at {res}x{res}",
            batched.shape()[2],
            batched.shape()[3]
        )));
    }
    let soft = generator_infer(weights, &batched)?;
    let binary = soft.map(|v| if v >= threshold { 1.0 } else { 0.0 });
    binary.reshape(&original)
}

/// Hyperparameters for shape-classifier training.
#[derive(Debug, Clone)]
pub struct ShapeCnnConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub resolution: usize,
    pub base_channels: usize,
}

impl Default for ShapeCnnConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 42,
            resolution: 32,
            base_channels: 8,
        }
    }
}

impl ShapeCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        self.spec()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(
            Variant::ShapeCnn,
            self.resolution,
            2,
            self.base_channels,
        )
    }
}

fn require_shape_labels(samples: &[SamplePair]) -> Result<Vec<ShapeLabel>> {
    samples
        .iter()
        .map(|s| {
            s.shape_label.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "sample '{}' lacks the shape label required for \
                     classifier training",
                    s.id
                ))
            })
        })
        .collect()
}

/// Assigns each sample to a fold (0-based), stratified by label: the
/// samples of every class are shuffled with the shared seeded stream
/// and dealt round-robin, so per-class fold sizes differ by at most
/// one. Errors when some class has fewer samples than folds, because a
/// fold would then miss that class entirely.
pub fn stratified_folds(
    labels: &[ShapeLabel],
    folds: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "fold assignment needs at least one sample".into(),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for (i, label) in labels.iter().enumerate() {
        by_class[label.code()].push(i);
    }
    for (code, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < folds {
            return Err(Error::InvalidArgument(format!(
                "class {} has {} samples, fewer than {folds} folds; \
                 stratification would leave folds without it",
                ShapeLabel::from_code(code)?,
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for (j, &idx) in members.iter().enumerate() {
            assignment[idx] = j % folds;
        }
    }
    Ok(assignment)
}

/// Supervised training of the shape classifier on labeled masks.
pub fn fit_shape_classifier(
    train: &[SamplePair],
    cfg: &ShapeCnnConfig,
) -> Result<Weights> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "classifier training set must be nonempty".into(),
        ));
    }
    check_resolution(train, cfg.resolution)?;
    let labels = require_shape_labels(train)?;
    let mut weights = build::<f64>(&cfg.spec()?, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, ADAM_EPS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let masks: Vec<Tensor> =
                chunk.iter().map(|&i| train[i].mask.clone()).collect();
            let targets: Vec<usize> =
                chunk.iter().map(|&i| labels[i].code()).collect();
            let mut step = || -> Result<()> {
                let mut tape = Tape::new();
                let net = bind(&mut tape, &weights, true)?;
                let xv = tape.constant(stack(&masks)?)?;
                let logits = shape_cnn_logits(&mut tape, &net, xv)?;
                let loss = tape.cross_entropy(logits, &targets)?;
                let loss_value = tape.value(loss)?.item()?;
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite classifier loss {loss_value}"
                    )));
                }
                tape.backward(loss)?;
                let grads: Vec<Tensor> = net
                    .vars()
                    .iter()
                    .map(|&v| tape.grad(v))
                    .collect::<Result<_>>()?;
                adam.step(weights.tensors_mut(), &grads)
            };
            step().map_err(|e| with_step(e, epoch, batch + 1))?;
        }
    }
    Ok(weights)
}

/// Held-out evaluation of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldOutcome {
    /// 0-based fold index.
    pub fold: usize,
    pub test_size: usize,
    /// Held-out accuracy, stored as raw `f64` bits so the struct can
    /// derive `Eq`; read it through [`FoldOutcome::accuracy`].
    pub accuracy_bits: u64,
    pub confusion: [[u64; 4]; 4],
}

impl FoldOutcome {
    pub fn accuracy(&self) -> f64 {
        f64::from_bits(self.accuracy_bits)
    }
}

/// Cross-validation summary across folds.
#[derive(Debug, Clone)]
pub struct CrossValReport {
    pub folds: Vec<FoldOutcome>,
    pub mean_accuracy: f64,
    pub pooled_confusion: [[u64; 4]; 4],
    pub pooled_accuracy: f64,
}

impl CrossValReport {
    /// Per-fold accuracy CSV with a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,test_size,accuracy\n");
        for fold in &self.folds {
            writeln!(
                out,
                "{},{},{}",
                fold.fold,
                fold.test_size,
                fold.accuracy()
            )
            .expect("string write");
        }
        let total: usize = self.folds.iter().map(|f| f.test_size).sum();
        writeln!(out, "mean,{},{}", total, self.mean_accuracy)
            .expect("string write");
        out
    }

    /// Pooled 4x4 confusion CSV (rows truth, columns predicted).
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth,irregular,lobular,oval,round\n");
        for (code, row) in self.pooled_confusion.iter().enumerate() {
            let label = ShapeLabel::from_code(code).expect("code in range");
            writeln!(
                out,
                "{},{},{},{},{}",
                label, row[0], row[1], row[2], row[3]
            )
            .expect("string write");
        }
        out
    }
}

/// Stratified k-fold cross-validation of the shape classifier: trains
/// one model per fold on the remaining folds and evaluates it on the
/// held-out part. Fold seeds derive from the config seed, so the whole
/// procedure is deterministic.
pub fn train_shape_cnn(
    samples: &[SamplePair],
    folds: usize,
    cfg: &ShapeCnnConfig,
) -> Result<(Vec<Weights>, CrossValReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "cross-validation needs at least one sample".into(),
        ));
    }
    check_resolution(samples, cfg.resolution)?;
    let labels = require_shape_labels(samples)?;
    let assignment = stratified_folds(&labels, folds, cfg.seed)?;

    let mut fold_weights = Vec::with_capacity(folds);
    let mut outcomes = Vec::with_capacity(folds);
    let mut pooled = [[0u64; 4]; 4];
    for fold in 0..folds {
        let train_set: Vec<SamplePair> = samples
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a != fold)
            .map(|(s, _)| s.clone())
            .collect();
        let test_idx: Vec<usize> = (0..samples.len())
            .filter(|&i| assignment[i] == fold)
            .collect();
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed.wrapping_add(1 + fold as u64);
        let weights = fit_shape_classifier(&train_set, &fold_cfg)?;

        let masks: Vec<Tensor> =
            test_idx.iter().map(|&i| samples[i].mask.clone()).collect();
        let truth: Vec<ShapeLabel> =
            test_idx.iter().map(|&i| labels[i]).collect();
        let predicted = classify_shapes(&weights, &masks)?;
        let (accuracy, confusion) = shape_accuracy(&predicted, &truth)?;
        for r in 0..4 {
            for c in 0..4 {
                pooled[r][c] += confusion[r][c];
            }
        }
        outcomes.push(FoldOutcome {
            fold,
            test_size: test_idx.len(),
            accuracy_bits: accuracy.to_bits(),
            confusion,
        });
        fold_weights.push(weights);
    }
    let mean_accuracy = outcomes
        .iter()
        .map(FoldOutcome::accuracy)
        .sum::<f64>()
        / folds as f64;
    let trace: u64 = (0..4).map(|i| pooled[i][i]).sum();
    let total: u64 = pooled.iter().flatten().sum();
    let pooled_accuracy = trace as f64 / total as f64;
    Ok((
        fold_weights,
        CrossValReport {
            folds: outcomes,
            mean_accuracy,
            pooled_confusion: pooled,
            pooled_accuracy,
        },
    ))
}
