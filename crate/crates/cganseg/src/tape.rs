//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Every operation appends a node holding the forward value and enough
//! bookkeeping to run the chain rule later. [`Tape::backward`] consumes
//! the tape: it seeds the scalar loss with gradient one and sweeps the
//! arena in reverse creation order, accumulating `dLoss/dTensor` into
//! every node that requires gradients.
//!
//! Design notes:
//! - Handles ([`Var`]) are tagged with the identity of the tape that
//!   created them, so using a handle on a foreign tape is an error
//!   rather than silent corruption.
//! - All kernels are plain sequential loops with a fixed accumulation
//!   order, which makes results bit-reproducible across runs.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone)]
enum Op<S: Scalar> {
    Leaf,
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, k: Var, stride: usize, pad: usize },
    AddBias { x: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: S },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: S },
    Concat { a: Var, b: Var, axis: usize },
    Dropout { x: Var, mask: Vec<S> },
    Reshape { x: Var },
    Softmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    MeanAll { x: Var },
    SumAll { x: Var },
    Abs { x: Var },
    LnClamped { x: Var, floor: S },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Arena tape recording a computation for one backward pass.
pub struct Tape<S: Scalar> {
    id: u64,
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape(
                "variable belongs to a different tape".into(),
            ));
        }
        if v.index >= self.nodes.len() {
            return Err(Error::Tape("variable index out of range".into()));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        Ok(&self.nodes[self.check(v)?])
    }

    /// Records a tensor that does not need gradients (inputs, targets).
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        t.validate_finite("constant")?;
        Ok(self.push(t, false, Op::Leaf))
    }

    /// Records a trainable leaf; backward will produce its gradient.
    pub fn param(&mut self, t: Tensor<S>) -> Result<Var> {
        t.validate_finite("param")?;
        Ok(self.push(t, true, Op::Leaf))
    }

    /// Forward value of a recorded tensor.
    pub fn value(&self, v: Var) -> Result<&Tensor<S>> {
        Ok(&self.node(v)?.value)
    }

    /// Gradient recorded by [`Tape::backward`]. Errors if backward has
    /// not run, or if the tensor does not require gradients or was not
    /// reachable from the loss.
    pub fn grad(&self, v: Var) -> Result<Tensor<S>> {
        let node = self.node(v)?;
        match &node.grad {
            Some(g) => Tensor::from_vec(node.value.shape(), g.clone()),
            None => Err(Error::Tape(
                "no gradient recorded for this tensor".into(),
            )),
        }
    }

    fn requires(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.nodes[v.index].requires_grad)
    }

    // ---- convolution ----

    /// 2D cross-correlation with stride and symmetric zero padding.
    /// `x` is `[n, c, h, w]`, `k` is `[f, c, kh, kw]`; the result is
    /// `[n, f, oh, ow]` with `oh = (h + 2*pad - kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let ki = self.check(k)?;
        let (data, shape) = kernels::conv2d(
            self.nodes[xi].value.data(),
            self.nodes[xi].value.shape(),
            self.nodes[ki].value.data(),
            self.nodes[ki].value.shape(),
            stride,
            pad,
        )?;
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.requires(&[x, k]);
        Ok(self.push(out, rg, Op::Conv2d { x, k, stride, pad }))
    }

    /// Transposed convolution: the linear adjoint of [`Tape::conv2d`]
    /// with the same kernel, stride and padding. `x` is `[n, f, h, w]`,
    /// `k` is `[f, c, kh, kw]`; the result is `[n, c, oh, ow]` with
    /// `oh = (h - 1) * stride + kh - 2*pad`.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let ki = self.check(k)?;
        let (data, shape) = kernels::conv2d_transpose(
            self.nodes[xi].value.data(),
            self.nodes[xi].value.shape(),
            self.nodes[ki].value.data(),
            self.nodes[ki].value.shape(),
            stride,
            pad,
        )?;
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.requires(&[x, k]);
        Ok(self.push(out, rg, Op::ConvT2d { x, k, stride, pad }))
    }

    /// Adds a per-channel bias `b` of shape `[c]` to `x` of shape
    /// `[n, c, h, w]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let bi = self.check(b)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        let bs = self.nodes[bi].value.shape();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::ShapeMismatch(format!(
                "add_bias needs x [n,c,h,w] and b [c], got {:?} and {:?}",
                xs, bs
            )));
        }
        let plane = xs[2] * xs[3];
        let mut data = self.nodes[xi].value.data().to_vec();
        let b_data = self.nodes[bi].value.data();
        for n in 0..xs[0] {
            for c in 0..xs[1] {
                let base = (n * xs[1] + c) * plane;
                let bv = b_data[c];
                for v in &mut data[base..base + plane] {
                    *v = *v + bv;
                }
            }
        }
        let out = Tensor::from_vec(&xs, data)?;
        let rg = self.requires(&[x, b]);
        Ok(self.push(out, rg, Op::AddBias { x, b }))
    }

    /// Fully connected layer: `x [n, k] * w [k, m] + b [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let wi = self.check(w)?;
        let bi = self.check(b)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        let bs = self.nodes[bi].value.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch(format!(
                "linear needs x [n,k] and w [k,m], got {:?} and {:?}",
                xs, ws
            )));
        }
        if bs.len() != 1 || bs[0] != ws[1] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias must be [m] = [{}], got {:?}",
                ws[1], bs
            )));
        }
        let (n, kdim, m) = (xs[0], xs[1], ws[1]);
        let xd = self.nodes[xi].value.data();
        let wd = self.nodes[wi].value.data();
        let bd = self.nodes[bi].value.data();
        let mut data = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &mut data[i * m..(i + 1) * m];
            row.copy_from_slice(bd);
            for kk in 0..kdim {
                let a = xd[i * kdim + kk];
                let wrow = &wd[kk * m..(kk + 1) * m];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o = *o + a * wv;
                }
            }
        }
        let out = Tensor::from_vec(&[n, m], data)?;
        let rg = self.requires(&[x, w, b]);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    // ---- elementwise ----

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(f);
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(out, rg, op))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu { x })
    }

    /// Leaky rectifier with the given negative-side slope in `[0, 1)`.
    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Result<Var> {
        if !(slope >= S::zero() && slope < S::one()) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must be in [0, 1), got {slope}"
            )));
        }
        self.unary(
            x,
            |v| if v > S::zero() { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid_scalar, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), Op::Abs { x })
    }

    /// Natural logarithm of `max(x, floor)`; `floor` must be positive so
    /// the result is always finite.
    pub fn ln_clamped(&mut self, x: Var, floor: S) -> Result<Var> {
        if !(floor > S::zero()) || !floor.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ln_clamped floor must be positive and finite, got {floor}"
            )));
        }
        self.unary(
            x,
            |v| if v > floor { v.ln() } else { floor.ln() },
            Op::LnClamped { x, floor },
        )
    }

    /// Elementwise `scale * x + shift` with finite constants.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var> {
        if !scale.is_finite() || !shift.is_finite() {
            return Err(Error::InvalidArgument(
                "affine constants must be finite".into(),
            ));
        }
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<(usize, usize)> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name} needs equal shapes, got {:?} and {:?}",
                self.nodes[ai].value.shape(),
                self.nodes[bi].value.shape()
            )));
        }
        Ok((ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape(a, b, "add")?;
        let data: Vec<S> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&u, &v)| u + v)
            .collect();
        let out = Tensor::from_vec(self.nodes[ai].value.shape(), data)?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape(a, b, "sub")?;
        let data: Vec<S> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&u, &v)| u - v)
            .collect();
        let out = Tensor::from_vec(self.nodes[ai].value.shape(), data)?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape(a, b, "mul")?;
        let data: Vec<S> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&u, &v)| u * v)
            .collect();
        let out = Tensor::from_vec(self.nodes[ai].value.shape(), data)?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    /// Concatenates two tensors along `axis`; all other extents must
    /// match.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa
                .iter()
                .zip(&sb)
                .enumerate()
                .any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(Error::ShapeMismatch(format!(
                "concat along axis {axis} needs matching shapes, got {sa:?} and {sb:?}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let block_a = sa[axis] * inner;
        let block_b = sb[axis] * inner;
        let da = self.nodes[ai].value.data();
        let db = self.nodes[bi].value.data();
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * block_a..(o + 1) * block_a]);
            data.extend_from_slice(&db[o * block_b..(o + 1) * block_b]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(out, rg, Op::Concat { a, b, axis }))
    }

    /// Inverted dropout: each element is zeroed with probability `p`,
    /// survivors are scaled by `1 / (1 - p)` so the expectation is
    /// unchanged. With `p = 0` this is the identity and records
    /// nothing. Inference-mode dropout is expressed by not calling this
    /// at all.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        let xi = self.check(x)?;
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.nodes[xi].value.numel())
            .map(|_| {
                if rng.gen::<f64>() >= p {
                    keep
                } else {
                    S::zero()
                }
            })
            .collect();
        let data: Vec<S> = self.nodes[xi]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::from_vec(self.nodes[xi].value.shape(), data)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(out, rg, Op::Dropout { x, mask }))
    }

    /// Same data viewed under new extents (element count preserved).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.reshape(shape)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        let cols = *shape.last().expect("rank >= 1 by construction");
        let xd = self.nodes[xi].value.data();
        let mut data = vec![S::zero(); xd.len()];
        for (row_out, row_in) in data.chunks_mut(cols).zip(xd.chunks(cols)) {
            let mx = row_in
                .iter()
                .fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut sum = S::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(out, rg, Op::Softmax { x }))
    }

    /// Mean cross-entropy between softmax(logits) and integer class
    /// targets. `logits` is `[n, c]`, `targets` holds `n` class indices
    /// below `c`. Computed in log-sum-exp form for stability; the
    /// result is a `[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let shape = self.nodes[li].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy needs logits [n, c], got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let xd = self.nodes[li].value.data();
        let mut probs = vec![S::zero(); n * c];
        let mut total = S::zero();
        for (i, (&t, row)) in targets.iter().zip(xd.chunks(c)).enumerate() {
            let mx = row
                .iter()
                .fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * c + j] = e;
                sum = sum + e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / sum;
            }
            // lse - logit[t] = ln(sum) + mx - logit[t]
            total = total + sum.ln() + mx - row[t];
        }
        let mean = total / S::from_f64(n as f64);
        let out = Tensor::scalar(mean)?;
        let rg = self.nodes[li].requires_grad;
        Ok(self.push(
            out,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let n = self.nodes[xi].value.numel();
        let sum = self.nodes[xi]
            .value
            .data()
            .iter()
            .fold(S::zero(), |a, &v| a + v);
        let out = Tensor::scalar(sum / S::from_f64(n as f64))?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(out, rg, Op::MeanAll { x }))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let sum = self.nodes[xi]
            .value
            .data()
            .iter()
            .fold(S::zero(), |a, &v| a + v);
        let out = Tensor::scalar(sum)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(out, rg, Op::SumAll { x }))
    }

    // ---- backward ----

    /// Runs the reverse sweep from a scalar loss, accumulating
    /// gradients for every reachable tensor that requires them. The
    /// tape can only be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape".into(),
            ));
        }
        self.consumed = true;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            // No trainable tensor feeds the loss; nothing to do.
            return Ok(());
        }
        for node in &mut self.nodes[..=li] {
            if node.requires_grad {
                node.grad = Some(vec![S::zero(); node.value.numel()]);
            }
        }
        self.nodes[li].grad.as_mut().expect("seeded above")[0] = S::one();

        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let deltas = self.node_backward(i, &op)?;
            for (var, delta) in deltas {
                let node = &mut self.nodes[var.index];
                if !node.requires_grad {
                    continue;
                }
                let g = node.grad.as_mut().expect("allocated above");
                debug_assert_eq!(g.len(), delta.len());
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi = *gi + *di;
                }
            }
        }
        Ok(())
    }

    /// Computes the gradient contributions one node pushes to its
    /// inputs. Inputs that do not require gradients are skipped.
    fn node_backward(&self, i: usize, op: &Op<S>) -> Result<Vec<(Var, Vec<S>)>> {
        let g = self.nodes[i].grad.as_ref().expect("caller checked");
        let y = &self.nodes[i].value;
        let needs = |v: &Var| self.nodes[v.index].requires_grad;
        let val = |v: &Var| &self.nodes[v.index].value;
        let mut out: Vec<(Var, Vec<S>)> = Vec::new();

        match op {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride, pad } => {
                let (xv, kv) = (val(x), val(k));
                if needs(x) {
                    let dx = kernels::conv2d_transpose_into(
                        g,
                        y.shape(),
                        kv.data(),
                        kv.shape(),
                        *stride,
                        *pad,
                        xv.shape()[2],
                        xv.shape()[3],
                    )?;
                    out.push((*x, dx));
                }
                if needs(k) {
                    let dk = kernels::kernel_grad(
                        xv.data(),
                        xv.shape(),
                        g,
                        y.shape(),
                        *stride,
                        *pad,
                        kv.shape()[2],
                        kv.shape()[3],
                    )?;
                    out.push((*k, dk));
                }
            }
            Op::ConvT2d { x, k, stride, pad } => {
                let (xv, kv) = (val(x), val(k));
                if needs(x) {
                    let (dx, _) = kernels::conv2d(
                        g,
                        y.shape(),
                        kv.data(),
                        kv.shape(),
                        *stride,
                        *pad,
                    )?;
                    out.push((*x, dx));
                }
                if needs(k) {
                    // Same contraction as the forward-conv kernel
                    // gradient with the roles of input and output
                    // gradient swapped.
                    let dk = kernels::kernel_grad(
                        g,
                        y.shape(),
                        xv.data(),
                        xv.shape(),
                        *stride,
                        *pad,
                        kv.shape()[2],
                        kv.shape()[3],
                    )?;
                    out.push((*k, dk));
                }
            }
            Op::AddBias { x, b } => {
                if needs(x) {
                    out.push((*x, g.clone()));
                }
                if needs(b) {
                    let xs = y.shape();
                    let plane = xs[2] * xs[3];
                    let mut db = vec![S::zero(); xs[1]];
                    for n in 0..xs[0] {
                        for (c, dbc) in db.iter_mut().enumerate() {
                            let base = (n * xs[1] + c) * plane;
                            for &gv in &g[base..base + plane] {
                                *dbc = *dbc + gv;
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (n, kdim) = (xv.shape()[0], xv.shape()[1]);
                let m = wv.shape()[1];
                if needs(x) {
                    let mut dx = vec![S::zero(); n * kdim];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for kk in 0..kdim {
                            let wrow = &wv.data()[kk * m..(kk + 1) * m];
                            let mut acc = S::zero();
                            for (&gv, &wvv) in grow.iter().zip(wrow) {
                                acc = acc + gv * wvv;
                            }
                            dx[i * kdim + kk] = acc;
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(w) {
                    let mut dw = vec![S::zero(); kdim * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for kk in 0..kdim {
                            let a = xv.data()[i * kdim + kk];
                            let drow = &mut dw[kk * m..(kk + 1) * m];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + a * gv;
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if needs(b) {
                    let mut db = vec![S::zero(); m];
                    for i in 0..n {
                        for (d, &gv) in db.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *d = *d + gv;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Relu { x } => {
                if needs(x) {
                    let dx = val(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if needs(x) {
                    let dx = val(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > S::zero() { gv } else { *slope * gv })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Tanh { x } => {
                if needs(x) {
                    let dx = y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&t, &gv)| gv * (S::one() - t * t))
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sigmoid { x } => {
                if needs(x) {
                    let dx = y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (S::one() - s))
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    out.push((*a, g.clone()));
                }
                if needs(b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub { a, b } => {
                if needs(a) {
                    out.push((*a, g.clone()));
                }
                if needs(b) {
                    out.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul { a, b } => {
                if needs(a) {
                    let da = val(b)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| v * gv)
                        .collect();
                    out.push((*a, da));
                }
                if needs(b) {
                    let db = val(a)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| v * gv)
                        .collect();
                    out.push((*b, db));
                }
            }
            Op::Affine { x, scale } => {
                if needs(x) {
                    out.push((*x, g.iter().map(|&v| *scale * v).collect()));
                }
            }
            Op::Concat { a, b, axis } => {
                let sa = val(a).shape();
                let sb = val(b).shape();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let block_a = sa[*axis] * inner;
                let block_b = sb[*axis] * inner;
                let block = block_a + block_b;
                if needs(a) {
                    let mut da = Vec::with_capacity(outer * block_a);
                    for o in 0..outer {
                        da.extend_from_slice(&g[o * block..o * block + block_a]);
                    }
                    out.push((*a, da));
                }
                if needs(b) {
                    let mut db = Vec::with_capacity(outer * block_b);
                    for o in 0..outer {
                        db.extend_from_slice(
                            &g[o * block + block_a..(o + 1) * block],
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Dropout { x, mask } => {
                if needs(x) {
                    let dx = mask.iter().zip(g).map(|(&m, &gv)| m * gv).collect();
                    out.push((*x, dx));
                }
            }
            Op::Reshape { x } => {
                if needs(x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::Softmax { x } => {
                if needs(x) {
                    let cols = *y.shape().last().expect("rank >= 1");
                    let mut dx = vec![S::zero(); y.numel()];
                    for ((drow, srow), grow) in dx
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let mut dot = S::zero();
                        for (&s, &gv) in srow.iter().zip(grow) {
                            dot = dot + s * gv;
                        }
                        for ((d, &s), &gv) in
                            drow.iter_mut().zip(srow).zip(grow)
                        {
                            *d = s * (gv - dot);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let scale = g[0] / S::from_f64(n as f64);
                    let mut dl = vec![S::zero(); probs.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { S::one() } else { S::zero() };
                            dl[i * c + j] = scale * (probs[i * c + j] - ind);
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::MeanAll { x } => {
                if needs(x) {
                    let n = val(x).numel();
                    let gv = g[0] / S::from_f64(n as f64);
                    out.push((*x, vec![gv; n]));
                }
            }
            Op::SumAll { x } => {
                if needs(x) {
                    out.push((*x, vec![g[0]; val(x).numel()]));
                }
            }
            Op::Abs { x } => {
                if needs(x) {
                    let dx = val(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            if v > S::zero() {
                                gv
                            } else if v < S::zero() {
                                -gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::LnClamped { x, floor } => {
                if needs(x) {
                    let dx = val(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > *floor { gv / v } else { S::zero() })
                        .collect();
                    out.push((*x, dx));
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    // Branch on sign so exp never overflows.
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Sequential convolution kernels shared by forward and backward passes.
pub(crate) mod kernels {
    use crate::error::{Error, Result};
    use crate::scalar::Scalar;

    fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "{what} must be rank 4, got {shape:?}"
            )));
        }
        Ok([shape[0], shape[1], shape[2], shape[3]])
    }

    fn out_extent(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
        if h + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!(
                "kernel extent {k} exceeds padded input extent {}",
                h + 2 * pad
            )));
        }
        Ok((h + 2 * pad - k) / stride + 1)
    }

    /// Strided 2D cross-correlation (gather form).
    pub fn conv2d<S: Scalar>(
        x: &[S],
        xs: &[usize],
        k: &[S],
        ks: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<(Vec<S>, [usize; 4])> {
        let [n_, c_in, h, w] = dims4(xs, "conv2d input")?;
        let [f_, kc, kh, kw] = dims4(ks, "conv2d kernel")?;
        if kc != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel expects {kc} channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let oh = out_extent(h, kh, stride, pad)?;
        let ow = out_extent(w, kw, stride, pad)?;
        let mut out = vec![S::zero(); n_ * f_ * oh * ow];
        for n in 0..n_ {
            for f in 0..f_ {
                let o_base = (n * f_ + f) * oh * ow;
                for c in 0..c_in {
                    let x_base = (n * c_in + c) * h * w;
                    let k_base = (f * kc + c) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = k[k_base + ky * kw + kx];
                            let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                            let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let xrow = &x[x_base + iy * w..x_base + (iy + 1) * w];
                                let orow =
                                    &mut out[o_base + oy * ow..o_base + (oy + 1) * ow];
                                if stride == 1 {
                                    let off = ox_lo + kx - pad;
                                    let xs_ = &xrow[off..off + (ox_hi - ox_lo)];
                                    for (o, &xv) in
                                        orow[ox_lo..ox_hi].iter_mut().zip(xs_)
                                    {
                                        *o = *o + wgt * xv;
                                    }
                                } else {
                                    for (ox, o) in
                                        orow[ox_lo..ox_hi].iter_mut().enumerate()
                                    {
                                        let ix = (ox_lo + ox) * stride + kx - pad;
                                        *o = *o + wgt * xrow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        check_finite(&out, "conv2d output")?;
        Ok((out, [n_, f_, oh, ow]))
    }

    /// Output positions `o` where `o*stride + k - pad` lands inside
    /// `[0, extent)`, given `limit` output positions in total.
    #[inline]
    fn valid_range(
        limit: usize,
        extent: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> (usize, usize) {
        let lo = if k < pad {
            (pad - k).div_ceil(stride)
        } else {
            0
        };
        // o*stride + k - pad <= extent - 1
        let hi = if extent + pad > k {
            (((extent + pad - k - 1) / stride) + 1).min(limit)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Transposed convolution with an explicit output size (scatter
    /// form). The default forward size is `(h-1)*stride + kh - 2*pad`;
    /// backward passes override it to recover the exact input extents.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_transpose_into<S: Scalar>(
        x: &[S],
        xs: &[usize],
        k: &[S],
        ks: &[usize],
        stride: usize,
        pad: usize,
        oh: usize,
        ow: usize,
    ) -> Result<Vec<S>> {
        let [n_, c_in, h, w] = dims4(xs, "conv2d_transpose input")?;
        let [kf, c_out, kh, kw] = dims4(ks, "conv2d_transpose kernel")?;
        if kf != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv2d_transpose kernel expects {kf} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let mut out = vec![S::zero(); n_ * c_out * oh * ow];
        for n in 0..n_ {
            for f in 0..c_in {
                let x_base = (n * c_in + f) * h * w;
                for c in 0..c_out {
                    let o_base = (n * c_out + c) * oh * ow;
                    let k_base = (f * c_out + c) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = k[k_base + ky * kw + kx];
                            let (iy_lo, iy_hi) = valid_range(h, oh, ky, stride, pad);
                            let (ix_lo, ix_hi) = valid_range(w, ow, kx, stride, pad);
                            for iy in iy_lo..iy_hi {
                                let oy = iy * stride + ky - pad;
                                let xrow = &x[x_base + iy * w..x_base + (iy + 1) * w];
                                let orow =
                                    &mut out[o_base + oy * ow..o_base + (oy + 1) * ow];
                                for ix in ix_lo..ix_hi {
                                    let ox = ix * stride + kx - pad;
                                    orow[ox] = orow[ox] + wgt * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        check_finite(&out, "conv2d_transpose output")?;
        Ok(out)
    }

    /// Transposed convolution at its natural output size.
    pub fn conv2d_transpose<S: Scalar>(
        x: &[S],
        xs: &[usize],
        k: &[S],
        ks: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<(Vec<S>, [usize; 4])> {
        let [n_, _c_in, h, w] = dims4(xs, "conv2d_transpose input")?;
        let [_, c_out, kh, kw] = dims4(ks, "conv2d_transpose kernel")?;
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0);
        let ow = ((w - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d_transpose output extent not positive for input {h}x{w}, \
                     kernel {kh}x{kw}, stride {stride}, pad {pad}"
                )))
            }
        };
        let out = conv2d_transpose_into(x, xs, k, ks, stride, pad, oh, ow)?;
        Ok((out, [n_, c_out, oh, ow]))
    }

    /// Gradient of a convolution with respect to its kernel:
    /// `dk[o,c,ky,kx] = sum over n,oy,ox of gout[n,o,oy,ox] *
    /// input[n,c, oy*stride+ky-pad, ox*stride+kx-pad]`. Also serves the
    /// transposed convolution (with `input` and `gout` swapped).
    #[allow(clippy::too_many_arguments)]
    pub fn kernel_grad<S: Scalar>(
        input: &[S],
        ishape: &[usize],
        gout: &[S],
        gshape: &[usize],
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    ) -> Result<Vec<S>> {
        let [n_, c_in, h, w] = dims4(ishape, "kernel_grad input")?;
        let [gn, c_out, oh, ow] = dims4(gshape, "kernel_grad gradient")?;
        if gn != n_ {
            return Err(Error::ShapeMismatch(format!(
                "kernel_grad batch mismatch: {n_} vs {gn}"
            )));
        }
        let mut dk = vec![S::zero(); c_out * c_in * kh * kw];
        for n in 0..n_ {
            for o in 0..c_out {
                let g_base = (n * c_out + o) * oh * ow;
                for c in 0..c_in {
                    let x_base = (n * c_in + c) * h * w;
                    let k_base = (o * c_in + c) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                            let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                            let mut acc = S::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let grow =
                                    &gout[g_base + oy * ow..g_base + (oy + 1) * ow];
                                let xrow =
                                    &input[x_base + iy * w..x_base + (iy + 1) * w];
                                if stride == 1 {
                                    let off = ox_lo + kx - pad;
                                    let xs_ = &xrow[off..off + (ox_hi - ox_lo)];
                                    for (&gv, &xv) in
                                        grow[ox_lo..ox_hi].iter().zip(xs_)
                                    {
                                        acc = acc + gv * xv;
                                    }
                                } else {
                                    for (ox, &gv) in
                                        grow[ox_lo..ox_hi].iter().enumerate()
                                    {
                                        let ix = (ox_lo + ox) * stride + kx - pad;
                                        acc = acc + gv * xrow[ix];
                                    }
                                }
                            }
                            dk[k_base + ky * kw + kx] =
                                dk[k_base + ky * kw + kx] + acc;
                        }
                    }
                }
            }
        }
        check_finite(&dk, "kernel gradient")?;
        Ok(dk)
    }

    fn check_finite<S: Scalar>(buf: &[S], what: &str) -> Result<()> {
        for v in buf {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{what} contains {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv2d_hand_computed() {
        // 1x1x3x3 input, single 2x2 kernel, stride 1, no padding.
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(
                Tensor::from_vec(
                    &[1, 1, 3, 3],
                    vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
                )
                .unwrap(),
            )
            .unwrap();
        let k = t
            .constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap())
            .unwrap();
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y).unwrap().shape(), &[1, 1, 2, 2]);
        // Each output adds the top-left and bottom-right of its window.
        assert_eq!(t.value(y).unwrap().data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn conv2d_stride_two_with_padding() {
        // Identity 1x1 kernel at stride 2 with pad 1 samples the padded
        // grid corners.
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(
                Tensor::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap(),
            )
            .unwrap();
        let k = t
            .constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.]).unwrap())
            .unwrap();
        let y = t.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(t.value(y).unwrap().shape(), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).unwrap().data(), &[0., 0., 0., 4.]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x, k), b> == <x, convT(b, k)> for random tensors, the
        // defining property of the transpose.
        let mut r = rng(7);
        for &(h, w, kh, kw, s, p) in &[
            (6usize, 6usize, 4usize, 4usize, 2usize, 1usize),
            (5, 7, 3, 3, 1, 0),
            (8, 8, 4, 4, 2, 1),
            (5, 5, 3, 3, 2, 0),
            (4, 4, 3, 3, 1, 2),
        ] {
            let x = random_tensor(&[2, 3, h, w], &mut r);
            let k = random_tensor(&[4, 3, kh, kw], &mut r);
            let (y, yshape) =
                kernels::conv2d(x.data(), x.shape(), k.data(), k.shape(), s, p)
                    .unwrap();
            let b: Vec<f64> = (0..y.len()).map(|_| r.gen::<f64>() - 0.5).collect();
            let xt = kernels::conv2d_transpose_into(
                &b, &yshape, k.data(), k.shape(), s, p, h, w,
            )
            .unwrap();
            let lhs: f64 = y.iter().zip(&b).map(|(a, c)| a * c).sum();
            let rhs: f64 = x.data().iter().zip(&xt).map(|(a, c)| a * c).sum();
            assert!(
                close(lhs, rhs, 1e-10),
                "adjoint identity failed: {lhs} vs {rhs} for \
                 h={h} w={w} kh={kh} kw={kw} s={s} p={p}"
            );
        }
    }

    #[test]
    fn conv_transpose_inverts_downsample_shape() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(3);
        let x = t.constant(random_tensor(&[1, 2, 16, 16], &mut r)).unwrap();
        let k = t.constant(random_tensor(&[4, 2, 4, 4], &mut r)).unwrap();
        let down = t.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(t.value(down).unwrap().shape(), &[1, 4, 8, 8]);
        let kt = t.constant(random_tensor(&[4, 2, 4, 4], &mut r)).unwrap();
        let up = t.conv2d_transpose(down, kt, 2, 1).unwrap();
        assert_eq!(t.value(up).unwrap().shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let mut t = Tape::<f64>::new();
            let mut r = rng(11);
            let x = t.constant(random_tensor(&[2, 3, 8, 8], &mut r)).unwrap();
            let k = t.constant(random_tensor(&[4, 3, 4, 4], &mut r)).unwrap();
            let y = t.conv2d(x, k, 2, 1).unwrap();
            let s = t.sigmoid(y).unwrap();
            t.value(s).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gradients_accumulate_additively() {
        // y = x + x means dy/dx = 2.
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::from_vec(&[2], vec![1.0, -3.0]).unwrap()).unwrap();
        let y = t.add(x, x).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn second_backward_fails() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(2.0).unwrap()).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let x = t1.param(Tensor::scalar(1.0).unwrap()).unwrap();
        assert!(matches!(t2.relu(x), Err(Error::Tape(_))));
        assert!(matches!(t2.value(x), Err(Error::Tape(_))));
    }

    #[test]
    fn grad_before_backward_is_an_error() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(1.0).unwrap()).unwrap();
        assert!(t.grad(x).is_err());
    }

    #[test]
    fn constant_gets_no_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::scalar(3.0).unwrap()).unwrap();
        let p = t.param(Tensor::scalar(2.0).unwrap()).unwrap();
        let y = t.mul(x, p).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(p).unwrap().data(), &[3.0]);
        assert!(t.grad(x).is_err());
    }

    #[test]
    fn mul_square_gradient() {
        // d(x*x)/dx = 2x even though both operands are the same node.
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(3.0).unwrap()).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn concat_roundtrip_gradients() {
        let mut t = Tape::<f64>::new();
        let a = t
            .param(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = t
            .param(Tensor::from_vec(&[1, 3, 1, 1], vec![3.0, 4.0, 5.0]).unwrap())
            .unwrap();
        let c = t.concat(a, b, 1).unwrap();
        assert_eq!(t.value(c).unwrap().shape(), &[1, 5, 1, 1]);
        assert_eq!(t.value(c).unwrap().data(), &[1., 2., 3., 4., 5.]);
        let w = t
            .constant(
                Tensor::from_vec(&[1, 5, 1, 1], vec![10., 20., 30., 40., 50.])
                    .unwrap(),
            )
            .unwrap();
        let y = t.mul(c, w).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[10., 20.]);
        assert_eq!(t.grad(b).unwrap().data(), &[30., 40., 50.]);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(1);
        let x = t.param(random_tensor(&[2, 3], &mut r)).unwrap();
        let y = t.dropout(x, 0.0, &mut r).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(5);
        let x = t
            .param(Tensor::from_vec(&[1000], vec![1.0; 1000]).unwrap())
            .unwrap();
        let y = t.dropout(x, 0.5, &mut r).unwrap();
        let data = t.value(y).unwrap().data().to_vec();
        // Survivors are exactly 2.0, dropped are exactly 0.0.
        assert!(data.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = data.iter().filter(|&&v| v != 0.0).count();
        assert!((300..700).contains(&kept));
        // Backward is masked by the same pattern.
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        for (gv, v) in g.data().iter().zip(&data) {
            assert_eq!(*gv, *v);
        }
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(1);
        let x = t.param(Tensor::scalar(1.0).unwrap()).unwrap();
        assert!(t.dropout(x, 1.0, &mut r).is_err());
        assert!(t.dropout(x, -0.1, &mut r).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(
                Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0])
                    .unwrap(),
            )
            .unwrap();
        let y = t.softmax(x).unwrap();
        let d = t.value(y).unwrap().data();
        assert!(close(d[0] + d[1] + d[2], 1.0, 1e-12));
        assert!(close(d[3] + d[4] + d[5], 1.0, 1e-12));
        // Large logits must not overflow.
        let big = t
            .constant(Tensor::from_vec(&[1, 2], vec![1000.0, 999.0]).unwrap())
            .unwrap();
        let yb = t.softmax(big).unwrap();
        assert!(t.value(yb).unwrap().data()[0].is_finite());
    }

    #[test]
    fn cross_entropy_matches_manual_value() {
        // Uniform logits over 4 classes: loss = ln 4.
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(Tensor::from_vec(&[2, 4], vec![0.0; 8]).unwrap())
            .unwrap();
        let ce = t.cross_entropy(x, &[1, 3]).unwrap();
        assert!(close(t.value(ce).unwrap().item().unwrap(), 4.0f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_validates_targets() {
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(Tensor::from_vec(&[2, 4], vec![0.0; 8]).unwrap())
            .unwrap();
        assert!(t.cross_entropy(x, &[0]).is_err());
        assert!(t.cross_entropy(x, &[0, 4]).is_err());
    }

    #[test]
    fn mean_and_sum_backward() {
        let mut t = Tape::<f64>::new();
        let x = t
            .param(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let m = t.mean_all(x).unwrap();
        assert!(close(t.value(m).unwrap().item().unwrap(), 2.5, 1e-12));
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn ln_clamped_floors_small_values() {
        let mut t = Tape::<f64>::new();
        let x = t
            .param(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let y = t.ln_clamped(x, 1e-12).unwrap();
        let d = t.value(y).unwrap().data().to_vec();
        assert!(close(d[0], (1e-12f64).ln(), 1e-9));
        assert!(close(d[1], 0.0, 1e-15));
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        // Clamped element has zero gradient; the other is 1/x = 1.
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn generic_core_compiles_in_f32() {
        let mut t = Tape::<f32>::new();
        let x = t
            .param(Tensor::from_vec(&[1, 1, 4, 4], vec![0.5f32; 16]).unwrap())
            .unwrap();
        let k = t
            .param(Tensor::from_vec(&[1, 1, 2, 2], vec![0.25f32; 4]).unwrap())
            .unwrap();
        let y = t.conv2d(x, k, 2, 0).unwrap();
        let s = t.mean_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(k).unwrap().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn linear_matches_manual() {
        let mut t = Tape::<f64>::new();
        let x = t
            .param(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let w = t
            .param(Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let b = t
            .param(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let y = t.linear(x, w, b).unwrap();
        let d = t.value(y).unwrap().data().to_vec();
        assert!(close(d[0], 9.1, 1e-12));
        assert!(close(d[1], 12.2, 1e-12));
        assert!(close(d[2], 15.3, 1e-12));
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(t.grad(x).unwrap().data(), &[6.0, 15.0]);
    }
}
