//! Network topologies: the two generator variants, the conditioned
//! discriminator, and the mask-shape classifier.
//!
//! Both generators are fully convolutional encoder/decoder stacks with
//! 4x4 kernels at stride 2 and padding 1, so every stage exactly halves
//! or doubles the spatial extent:
//!
//! - encoder stage `i`: conv -> bias -> leaky ReLU (slope 0.2);
//! - decoder stage `j`: transposed conv -> bias -> ReLU, with dropout
//!   0.5 on the innermost `min(3, depth-1)` stages during training; the
//!   final stage emits one channel through a sigmoid.
//!
//! `GenUnet` concatenates each decoder input with the mirrored encoder
//! activation (skip connections); `GenAutoEnc` funnels everything
//! through the bottleneck. The discriminator stacks the same encoder on
//! the 2-channel pair `(image, mask)` and scores it with a fully
//! connected sigmoid head. The shape classifier is two 3x3/stride-2
//! convolutions followed by two fully connected layers over four
//! classes.
//!
//! Parameter names and shapes are fully determined by the
//! [`NetworkSpec`]; [`param_layout`] is the single source of truth used
//! by construction, binding and checkpoint I/O.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Network archetype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Generator without skip connections.
    GenAutoEnc,
    /// Generator with encoder-to-decoder skip connections.
    GenUnet,
    /// Conditioned discriminator over (image, mask) pairs.
    Discriminator,
    /// Four-class mask-shape classifier.
    ShapeCnn,
}

impl Variant {
    pub fn is_generator(self) -> bool {
        matches!(self, Variant::GenAutoEnc | Variant::GenUnet)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Variant::GenAutoEnc => 0,
            Variant::GenUnet => 1,
            Variant::Discriminator => 2,
            Variant::ShapeCnn => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Variant::GenAutoEnc,
            1 => Variant::GenUnet,
            2 => Variant::Discriminator,
            3 => Variant::ShapeCnn,
            other => {
                return Err(Error::Format(format!(
                    "unknown network variant code {other}"
                )))
            }
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::GenAutoEnc => "autoenc",
            Variant::GenUnet => "unet",
            Variant::Discriminator => "discriminator",
            Variant::ShapeCnn => "shapecnn",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "autoenc" | "auto-enc" | "autoencoder" => Ok(Variant::GenAutoEnc),
            "unet" | "u-net" => Ok(Variant::GenUnet),
            "discriminator" => Ok(Variant::Discriminator),
            "shapecnn" | "shape-cnn" => Ok(Variant::ShapeCnn),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected autoenc, unet, \
                 discriminator or shapecnn)"
            ))),
        }
    }
}

/// Complete structural description of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub variant: Variant,
    /// Square input extent in pixels; a power of two.
    pub input_resolution: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    /// Channel count of the first encoder stage; later stages double
    /// it, capped at `8 * base_channels`.
    pub base_channels: usize,
}

impl NetworkSpec {
    pub fn new(
        variant: Variant,
        input_resolution: usize,
        depth: usize,
        base_channels: usize,
    ) -> Result<Self> {
        let spec = Self {
            variant,
            input_resolution,
            depth,
            base_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.variant == Variant::ShapeCnn && self.depth != 2 {
            return Err(Error::InvalidArgument(format!(
                "the shape classifier has exactly 2 convolutional stages, \
                 got depth {}",
                self.depth
            )));
        }
        if self.base_channels < 4 {
            return Err(Error::InvalidArgument(format!(
                "base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        if !self.input_resolution.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "input resolution must be a power of two, got {}",
                self.input_resolution
            )));
        }
        let min_res = 1usize << self.depth;
        if self.input_resolution < min_res {
            return Err(Error::InvalidArgument(format!(
                "input resolution {} is too small for depth {} \
                 (needs at least {min_res})",
                self.input_resolution, self.depth
            )));
        }
        Ok(())
    }

    /// Channels produced by encoder stage `i`.
    fn enc_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.base_channels * 8)
    }

    /// Spatial extent of the bottleneck feature map.
    pub fn bottleneck_extent(&self) -> usize {
        self.input_resolution >> self.depth
    }
}

/// Ordered `(name, shape)` pairs of every trainable tensor, uniquely
/// determined by the `NetworkSpec`. Convolution kernels are `[out, in, kh, kw]`
/// for encoder stages and `[in, out, kh, kw]` for transposed decoder
/// stages.
pub fn param_layout(spec: &NetworkSpec) -> Result<Vec<(String, Vec<usize>)>> {
    spec.validate()?;
    let mut layout = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        layout.push((name, shape));
    };
    match spec.variant {
        Variant::GenAutoEnc | Variant::GenUnet => {
            let d = spec.depth;
            for i in 0..d {
                let cin = if i == 0 { 1 } else { spec.enc_channels(i - 1) };
                let cout = spec.enc_channels(i);
                push(format!("enc{i}.w"), vec![cout, cin, 4, 4]);
                push(format!("enc{i}.b"), vec![cout]);
            }
            let unet = spec.variant == Variant::GenUnet;
            for j in 0..d {
                let prev_out = if j == 0 {
                    spec.enc_channels(d - 1)
                } else {
                    // Decoder stage j-1 produced enc_channels(d-1-j).
                    spec.enc_channels(d - 1 - j)
                };
                let skip = if unet && j > 0 {
                    spec.enc_channels(d - 1 - j)
                } else {
                    0
                };
                let cin = prev_out + skip;
                let cout = if j == d - 1 {
                    1
                } else {
                    spec.enc_channels(d - 2 - j)
                };
                push(format!("dec{j}.w"), vec![cin, cout, 4, 4]);
                push(format!("dec{j}.b"), vec![cout]);
            }
        }
        Variant::Discriminator => {
            let d = spec.depth;
            for i in 0..d {
                let cin = if i == 0 { 2 } else { spec.enc_channels(i - 1) };
                let cout = spec.enc_channels(i);
                push(format!("enc{i}.w"), vec![cout, cin, 4, 4]);
                push(format!("enc{i}.b"), vec![cout]);
            }
            let ext = spec.bottleneck_extent();
            let flat = spec.enc_channels(d - 1) * ext * ext;
            push("fc.w".into(), vec![flat, 1]);
            push("fc.b".into(), vec![1]);
        }
        Variant::ShapeCnn => {
            let c0 = spec.base_channels;
            let c1 = 2 * spec.base_channels;
            push("conv0.w".into(), vec![c0, 1, 3, 3]);
            push("conv0.b".into(), vec![c0]);
            push("conv1.w".into(), vec![c1, c0, 3, 3]);
            push("conv1.b".into(), vec![c1]);
            let ext = spec.input_resolution / 4;
            let flat = c1 * ext * ext;
            push("fc0.w".into(), vec![flat, 64]);
            push("fc0.b".into(), vec![64]);
            push("fc1.w".into(), vec![64, 4]);
            push("fc1.b".into(), vec![4]);
        }
    }
    Ok(layout)
}

/// A network's parameters: the `NetworkSpec` they belong to, the seed they were
/// initialized from, and one tensor per [`param_layout`] entry, in
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<S: Scalar> {
    spec: NetworkSpec,
    seed: u64,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Weights<S> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Reassembles a `Weights` from externally produced tensors; they
    /// must match the `NetworkSpec` layout exactly.
    pub fn from_tensors(
        spec: NetworkSpec,
        seed: u64,
        tensors: Vec<Tensor<S>>,
    ) -> Result<Self> {
        let layout = param_layout(&spec)?;
        if tensors.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors supplied, layout has {}",
                tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name} has shape {:?}, layout requires {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(Self {
            spec,
            seed,
            tensors,
        })
    }
}

/// Builds freshly initialized weights: kernels and fully connected
/// matrices are drawn from a normal distribution with standard
/// deviation 0.02 in layout order from a ChaCha stream seeded with
/// `seed`; biases start at zero (and consume no random draws).
pub fn build<S: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Weights<S>> {
    let layout = param_layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).expect("constant parameters are valid");
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let t = if name.ends_with(".b") {
            Tensor::zeros(shape)?
        } else {
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n)
                .map(|_| S::from_f64(normal.sample(&mut rng)))
                .collect();
            Tensor::from_vec(shape, data)?
        };
        tensors.push(t);
    }
    Ok(Weights {
        spec: *spec,
        seed,
        tensors,
    })
}

/// Weights recorded on a tape, ready for forward passes.
pub struct BoundNet {
    spec: NetworkSpec,
    vars: Vec<Var>,
}

impl BoundNet {
    /// Wraps already-recorded tape variables as a network, one per
    /// parameter tensor in layout order. Lets callers drive forward
    /// passes from variables they bound themselves (gradient checking,
    /// custom freezing schemes).
    pub fn from_vars(spec: NetworkSpec, vars: Vec<Var>) -> Result<Self> {
        let expected = param_layout(&spec)?.len();
        if vars.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{} parameter tensors bound, layout has {expected}",
                vars.len()
            )));
        }
        Ok(Self { spec, vars })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Result<Var> {
        // Layout order is deterministic, so a linear scan over the
        // derived names is cheap and avoids storing them.
        let layout = param_layout(&self.spec)?;
        layout
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Tape(format!("no parameter named {name}")))
    }
}

/// Records every parameter tensor on the tape. With `trainable` set,
/// backward passes accumulate gradients for them; otherwise they are
/// constants (e.g. the discriminator during a generator step).
pub fn bind<S: Scalar>(
    tape: &mut Tape<S>,
    weights: &Weights<S>,
    trainable: bool,
) -> Result<BoundNet> {
    let vars = weights
        .tensors()
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundNet {
        spec: *weights.spec(),
        vars,
    })
}

fn check_square_input<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    channels: usize,
    what: &str,
) -> Result<(usize, usize)> {
    let shape = tape.value(x)?.shape().to_vec();
    if shape.len() != 4 || shape[1] != channels || shape[2] != shape[3] {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be [n, {channels}, r, r], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[2]))
}

/// Runs a generator over a batch `[n, 1, r, r]`. The same weights
/// accept any square resolution divisible by `2^depth` (the stack is
/// fully convolutional). Pass a generator RNG to enable the stochastic
/// dropout path (training mode or stochastic inference); `None` means
/// plain deterministic inference.
pub fn generator_forward<S: Scalar, R: rand::Rng>(
    tape: &mut Tape<S>,
    net: &BoundNet,
    x: Var,
    mut dropout_rng: Option<&mut R>,
) -> Result<Var> {
    if !net.spec.variant.is_generator() {
        return Err(Error::InvalidArgument(format!(
            "generator_forward needs a generator, got {}",
            net.spec.variant
        )));
    }
    let (_, r) = check_square_input(tape, x, 1, "generator input")?;
    let unit = 1usize << net.spec.depth;
    if r < unit || r % unit != 0 {
        return Err(Error::ShapeMismatch(format!(
            "generator resolution {r} is not divisible by 2^depth = {unit}"
        )));
    }
    let d = net.spec.depth;
    let slope = S::from_f64(0.2);

    let mut enc_outputs = Vec::with_capacity(d);
    let mut h = x;
    for i in 0..d {
        let w = net.var(&format!("enc{i}.w"))?;
        let b = net.var(&format!("enc{i}.b"))?;
        let conv = tape.conv2d(h, w, 2, 1)?;
        let biased = tape.add_bias(conv, b)?;
        h = tape.leaky_relu(biased, slope)?;
        enc_outputs.push(h);
    }

    let unet = net.spec.variant == Variant::GenUnet;
    let dropout_stages = 3.min(d - 1);
    let mut dec = enc_outputs[d - 1];
    for j in 0..d {
        let input = if unet && j > 0 {
            tape.concat(dec, enc_outputs[d - 1 - j], 1)?
        } else {
            dec
        };
        let w = net.var(&format!("dec{j}.w"))?;
        let b = net.var(&format!("dec{j}.b"))?;
        let conv = tape.conv2d_transpose(input, w, 2, 1)?;
        let biased = tape.add_bias(conv, b)?;
        if j == d - 1 {
            return tape.sigmoid(biased);
        }
        dec = tape.relu(biased)?;
        if j < dropout_stages {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                dec = tape.dropout(dec, 0.5, rng)?;
            }
        }
    }
    unreachable!("loop always returns at the final stage")
}

/// Scores image/mask pairs: `[n, 1, r, r]` each, at exactly the `NetworkSpec`
/// resolution (the fully connected head fixes it). Returns per-sample
/// probabilities `[n]` in (0, 1).
pub fn discriminator_forward<S: Scalar>(
    tape: &mut Tape<S>,
    net: &BoundNet,
    x: Var,
    mask: Var,
) -> Result<Var> {
    if net.spec.variant != Variant::Discriminator {
        return Err(Error::InvalidArgument(format!(
            "discriminator_forward needs a discriminator, got {}",
            net.spec.variant
        )));
    }
    let (n, rx) = check_square_input(tape, x, 1, "discriminator image")?;
    let (_, rm) = check_square_input(tape, mask, 1, "discriminator mask")?;
    if rx != net.spec.input_resolution || rm != net.spec.input_resolution {
        return Err(Error::ShapeMismatch(format!(
            "discriminator expects resolution {}, got image {rx} and mask {rm}",
            net.spec.input_resolution
        )));
    }
    if tape.value(x)?.shape()[0] != tape.value(mask)?.shape()[0] {
        return Err(Error::ShapeMismatch(
            "image and mask batches differ".into(),
        ));
    }
    let slope = S::from_f64(0.2);
    let mut h = tape.concat(x, mask, 1)?;
    for i in 0..net.spec.depth {
        let w = net.var(&format!("enc{i}.w"))?;
        let b = net.var(&format!("enc{i}.b"))?;
        let conv = tape.conv2d(h, w, 2, 1)?;
        let biased = tape.add_bias(conv, b)?;
        h = tape.leaky_relu(biased, slope)?;
    }
    let ext = net.spec.bottleneck_extent();
    let flat = net.spec.enc_channels(net.spec.depth - 1) * ext * ext;
    let flattened = tape.reshape(h, &[n, flat])?;
    let w = net.var("fc.w")?;
    let b = net.var("fc.b")?;
    let logit = tape.linear(flattened, w, b)?;
    let score = tape.sigmoid(logit)?;
    tape.reshape(score, &[n])
}

/// Class logits `[n, 4]` for a batch of masks `[n, 1, r, r]` at the
/// spec resolution. Training uses these with cross-entropy.
pub fn shape_cnn_logits<S: Scalar>(
    tape: &mut Tape<S>,
    net: &BoundNet,
    mask: Var,
) -> Result<Var> {
    if net.spec.variant != Variant::ShapeCnn {
        return Err(Error::InvalidArgument(format!(
            "shape_cnn_logits needs the shape classifier, got {}",
            net.spec.variant
        )));
    }
    let (n, r) = check_square_input(tape, mask, 1, "classifier input")?;
    if r != net.spec.input_resolution {
        return Err(Error::ShapeMismatch(format!(
            "classifier expects resolution {}, got {r}",
            net.spec.input_resolution
        )));
    }
    let mut h = mask;
    for i in 0..2 {
        let w = net.var(&format!("conv{i}.w"))?;
        let b = net.var(&format!("conv{i}.b"))?;
        let conv = tape.conv2d(h, w, 2, 1)?;
        let biased = tape.add_bias(conv, b)?;
        h = tape.relu(biased)?;
    }
    let ext = net.spec.input_resolution / 4;
    let flat = 2 * net.spec.base_channels * ext * ext;
    let flattened = tape.reshape(h, &[n, flat])?;
    let w0 = net.var("fc0.w")?;
    let b0 = net.var("fc0.b")?;
    let hidden_lin = tape.linear(flattened, w0, b0)?;
    let hidden = tape.relu(hidden_lin)?;
    let w1 = net.var("fc1.w")?;
    let b1 = net.var("fc1.b")?;
    tape.linear(hidden, w1, b1)
}

/// Class probabilities `[n, 4]` (softmax over the logits).
pub fn shape_cnn_forward<S: Scalar>(
    tape: &mut Tape<S>,
    net: &BoundNet,
    mask: Var,
) -> Result<Var> {
    let logits = shape_cnn_logits(tape, net, mask)?;
    tape.softmax(logits)
}

/// Deterministic inference: runs the generator without dropout and
/// returns soft masks in (0, 1) with the input's shape.
pub fn generator_infer<S: Scalar>(
    weights: &Weights<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let net = bind(&mut tape, weights, false)?;
    let xv = tape.constant(x.clone())?;
    let out = generator_forward::<S, ChaCha8Rng>(&mut tape, &net, xv, None)?;
    Ok(tape.value(out)?.clone())
}

/// Discriminator scores `[n]` without recording gradients.
pub fn discriminator_infer<S: Scalar>(
    weights: &Weights<S>,
    x: &Tensor<S>,
    mask: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let net = bind(&mut tape, weights, false)?;
    let xv = tape.constant(x.clone())?;
    let mv = tape.constant(mask.clone())?;
    let out = discriminator_forward(&mut tape, &net, xv, mv)?;
    Ok(tape.value(out)?.clone())
}

/// Shape-class probabilities `[n, 4]` without recording gradients.
pub fn shape_cnn_infer<S: Scalar>(
    weights: &Weights<S>,
    masks: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let net = bind(&mut tape, weights, false)?;
    let mv = tape.constant(masks.clone())?;
    let out = shape_cnn_forward(&mut tape, &net, mv)?;
    Ok(tape.value(out)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn gen_spec(variant: Variant, res: usize, depth: usize) -> NetworkSpec {
        NetworkSpec::new(variant, res, depth, 4).unwrap()
    }

    #[test]
    fn layout_hand_checked_depth_two() {
        let spec = gen_spec(Variant::GenUnet, 8, 2);
        let layout = param_layout(&spec).unwrap();
        let expect: Vec<(&str, Vec<usize>)> = vec![
            ("enc0.w", vec![4, 1, 4, 4]),
            ("enc0.b", vec![4]),
            ("enc1.w", vec![8, 4, 4, 4]),
            ("enc1.b", vec![8]),
            ("dec0.w", vec![8, 4, 4, 4]),
            ("dec0.b", vec![4]),
            ("dec1.w", vec![8, 1, 4, 4]),
            ("dec1.b", vec![1]),
        ];
        let got: Vec<(&str, Vec<usize>)> = layout
            .iter()
            .map(|(n, s)| (n.as_str(), s.clone()))
            .collect();
        assert_eq!(got, expect);

        // Without skips the final stage sees only 4 input channels.
        let spec = gen_spec(Variant::GenAutoEnc, 8, 2);
        let layout = param_layout(&spec).unwrap();
        assert_eq!(layout[6].1, vec![4, 1, 4, 4]);
    }

    #[test]
    fn layout_discriminator_and_classifier() {
        let spec = gen_spec(Variant::Discriminator, 8, 2);
        let layout = param_layout(&spec).unwrap();
        assert_eq!(layout[0].1, vec![4, 2, 4, 4]);
        assert_eq!(layout[4].0, "fc.w");
        assert_eq!(layout[4].1, vec![8 * 2 * 2, 1]);

        let spec = NetworkSpec::new(Variant::ShapeCnn, 16, 2, 8).unwrap();
        let layout = param_layout(&spec).unwrap();
        assert_eq!(layout[0].1, vec![8, 1, 3, 3]);
        assert_eq!(layout[2].1, vec![16, 8, 3, 3]);
        assert_eq!(layout[4].1, vec![16 * 4 * 4, 64]);
        assert_eq!(layout[6].1, vec![64, 4]);
    }

    #[test]
    fn channel_growth_caps_at_eight_times_base() {
        let spec = NetworkSpec::new(Variant::GenAutoEnc, 2048, 11, 4).unwrap();
        let layout = param_layout(&spec).unwrap();
        // Stage 10 would be 4 * 2^10 without the cap.
        let (_, shape) = &layout[2 * 10];
        assert_eq!(shape[0], 32);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(NetworkSpec::new(Variant::GenUnet, 8, 1, 4).is_err());
        assert!(NetworkSpec::new(Variant::GenUnet, 8, 2, 3).is_err());
        assert!(NetworkSpec::new(Variant::GenUnet, 10, 2, 4).is_err());
        assert!(NetworkSpec::new(Variant::GenUnet, 4, 3, 4).is_err());
        assert!(NetworkSpec::new(Variant::ShapeCnn, 16, 3, 8).is_err());
    }

    #[test]
    fn build_is_seed_deterministic() {
        let spec = gen_spec(Variant::GenUnet, 8, 2);
        let a: Weights<f64> = build(&spec, 7).unwrap();
        let b: Weights<f64> = build(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c: Weights<f64> = build(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero() {
        let spec = gen_spec(Variant::GenUnet, 8, 2);
        let w: Weights<f64> = build(&spec, 1).unwrap();
        let layout = param_layout(&spec).unwrap();
        for ((name, _), t) in layout.iter().zip(w.tensors()) {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            } else {
                assert!(t.data().iter().any(|&v| v != 0.0), "{name} all zero");
            }
        }
    }

    #[test]
    fn generator_output_matches_input_shape() {
        for variant in [Variant::GenAutoEnc, Variant::GenUnet] {
            let spec = gen_spec(variant, 16, 3);
            let w: Weights<f64> = build(&spec, 3).unwrap();
            let x = Tensor::full(&[2, 1, 16, 16], 0.5).unwrap();
            let y = generator_infer(&w, &x).unwrap();
            assert_eq!(y.shape(), &[2, 1, 16, 16]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn generator_is_fully_convolutional() {
        // The same weights run at other resolutions divisible by
        // 2^depth.
        let spec = gen_spec(Variant::GenUnet, 16, 3);
        let w: Weights<f64> = build(&spec, 3).unwrap();
        for r in [8usize, 16, 32] {
            let x = Tensor::full(&[1, 1, r, r], 0.3).unwrap();
            let y = generator_infer(&w, &x).unwrap();
            assert_eq!(y.shape(), &[1, 1, r, r]);
        }
        let bad = Tensor::full(&[1, 1, 12, 12], 0.3).unwrap();
        assert!(generator_infer(&w, &bad).is_err());
    }

    #[test]
    fn discriminator_scores_are_probabilities() {
        let spec = gen_spec(Variant::Discriminator, 16, 3);
        let w: Weights<f64> = build(&spec, 5).unwrap();
        let x = Tensor::full(&[3, 1, 16, 16], 0.4).unwrap();
        let m = Tensor::full(&[3, 1, 16, 16], 1.0).unwrap();
        let s = discriminator_infer(&w, &x, &m).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // The head pins the resolution.
        let small = Tensor::full(&[3, 1, 8, 8], 0.4).unwrap();
        assert!(discriminator_infer(&w, &small, &small).is_err());
    }

    #[test]
    fn shape_cnn_probabilities_sum_to_one() {
        let spec = NetworkSpec::new(Variant::ShapeCnn, 16, 2, 8).unwrap();
        let w: Weights<f64> = build(&spec, 9).unwrap();
        let m = Tensor::full(&[2, 1, 16, 16], 1.0).unwrap();
        let p = shape_cnn_infer(&w, &m).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        for row in p.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_deterministic_and_dropout_stochastic() {
        let spec = gen_spec(Variant::GenUnet, 16, 3);
        let w: Weights<f64> = build(&spec, 11).unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.6).unwrap();
        let a = generator_infer(&w, &x).unwrap();
        let b = generator_infer(&w, &x).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));

        // Training mode with identical rng state reproduces bits;
        // different state gives a different mask.
        let run = |seed: u64| {
            let mut tape = Tape::<f64>::new();
            let net = bind(&mut tape, &w, false).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y = generator_forward(&mut tape, &net, xv, Some(&mut rng)).unwrap();
            tape.value(y).unwrap().data().to_vec()
        };
        let r1 = run(42);
        let r2 = run(42);
        let r3 = run(43);
        assert!(r1.iter().zip(&r2).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(r1.iter().zip(&r3).any(|(p, q)| p != q));
    }

    #[test]
    fn wrong_variant_forwards_rejected() {
        let gspec = gen_spec(Variant::GenUnet, 8, 2);
        let gw: Weights<f64> = build(&gspec, 1).unwrap();
        let x = Tensor::full(&[1, 1, 8, 8], 0.5).unwrap();
        assert!(discriminator_infer(&gw, &x, &x).is_err());
        assert!(shape_cnn_infer(&gw, &x).is_err());
    }

    #[test]
    fn variant_round_trips_through_strings() {
        for v in [
            Variant::GenAutoEnc,
            Variant::GenUnet,
            Variant::Discriminator,
            Variant::ShapeCnn,
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()).unwrap(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
        assert!(Variant::from_code(9).is_err());
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let spec = gen_spec(Variant::GenUnet, 8, 2);
        let w: Weights<f64> = build(&spec, 13).unwrap();
        let mut tape = Tape::<f64>::new();
        let net = bind(&mut tape, &w, true).unwrap();
        let x = tape
            .constant(Tensor::full(&[1, 1, 8, 8], 0.5).unwrap())
            .unwrap();
        let y = generator_forward::<f64, ChaCha8Rng>(&mut tape, &net, x, None)
            .unwrap();
        let loss = tape.mean_all(y).unwrap();
        tape.backward(loss).unwrap();
        for (i, &v) in net.vars().iter().enumerate() {
            let g = tape.grad(v).unwrap();
            assert_eq!(g.shape(), w.tensors()[i].shape());
        }
    }
}
