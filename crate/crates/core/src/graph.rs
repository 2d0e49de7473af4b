//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends one node recording its
//! inputs and the data its backward rule needs. Nodes are referenced by
//! [`Var`] handles that are only meaningful on the graph that created
//! them; separate graphs never exchange gradients.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{s, Scalar};
use crate::tensor::{clamp_value, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        x: Var,
        bias: Var,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        var: Vec<S>,
        eps: S,
        training: bool,
    },
    Relu(Var),
    Tanh(Var),
    ConcatChannels {
        a: Var,
        b: Var,
        c_a: usize,
        c_b: usize,
        plane: usize,
        batch: usize,
    },
    Flatten(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
        classes: usize,
    },
    Sign(Var),
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Detach,
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op<S>,
}

/// Ordered record of executed operations with their backward rules.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Graph<S> {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a value as a leaf node.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, requires_grad, Op::Leaf)
    }

    /// Leaf shorthand for values that never need gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// The value of a scalar (rank-0 or single-element) node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, needs_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, false, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, false, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, false, needs, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(value, false, needs, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], data),
            false,
            needs,
            Op::Matmul { a, b, m, k, n },
        ))
    }

    /// `[rows, cols] + [cols]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bdata = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b_val) in row.iter_mut().zip(&bdata) {
                *v = *v + b_val;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data),
            false,
            needs,
            Op::AddRowBias { x, bias, rows, cols },
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, padding)
            .ok_or(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sw.clone(),
            })?;
        let zero_bias;
        let bias_slice: &[S] = match bias {
            Some(bv) => {
                let sb = self.value(bv).shape();
                if sb != [geom.c_out] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: sb.to_vec(),
                        rhs: vec![geom.c_out],
                    });
                }
                self.value(bv).data()
            }
            None => {
                zero_bias = vec![S::zero(); geom.c_out];
                &zero_bias
            }
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias_slice, &geom);
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], data),
            false,
            needs,
            Op::Conv2d { x, w, bias, geom },
        ))
    }

    /// Per-channel mean and biased variance of a `[B,C,H,W]` node's value.
    pub fn channel_stats(&self, x: Var) -> (Vec<S>, Vec<S>) {
        let t = self.value(x);
        let shape = t.shape();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let n = s::<S>((b * plane) as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ci in 0..c {
            let mut acc = S::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for &v in &t.data()[base..base + plane] {
                    acc = acc + v;
                }
            }
            mean[ci] = acc / n;
        }
        for ci in 0..c {
            let m = mean[ci];
            let mut acc = S::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for &v in &t.data()[base..base + plane] {
                    let d = v - m;
                    acc = acc + d * d;
                }
            }
            var[ci] = acc / n;
        }
        (mean, var)
    }

    /// Batch normalization over `[B,C,H,W]` with caller-provided statistics.
    ///
    /// In training mode the statistics must be the batch statistics of `x`
    /// (see [`Graph::channel_stats`]) and the backward pass differentiates
    /// through them; in eval mode they are treated as constants.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        var: Vec<S>,
        eps: S,
        training: bool,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::BadShape {
                op: "batchnorm2d",
                expected: "[B,C,H,W]".into(),
                got: shape,
            });
        }
        let c = shape[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d scale/shift",
                lhs: self.value(gamma).shape().to_vec(),
                rhs: vec![c],
            });
        }
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d stats",
                lhs: vec![mean.len(), var.len()],
                rhs: vec![c],
            });
        }
        let plane = shape[2] * shape[3];
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let xt = self.value(x);
        let mut out = vec![S::zero(); xt.len()];
        for bi in 0..shape[0] {
            for ci in 0..c {
                let inv_std = (var[ci] + eps).sqrt().recip();
                let (g_val, b_val, m_val) = (gdata[ci], bdata[ci], mean[ci]);
                let base = (bi * c + ci) * plane;
                for (o, &v) in out[base..base + plane]
                    .iter_mut()
                    .zip(&xt.data()[base..base + plane])
                {
                    *o = (v - m_val) * inv_std * g_val + b_val;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out),
            false,
            needs,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                training,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > S::zero() { v } else { S::zero() });
        let needs = self.needs(a);
        self.push(value, false, needs, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.tanh());
        let needs = self.needs(a);
        self.push(value, false, needs, Op::Tanh(a))
    }

    /// Concatenates two `[B,C,H,W]` nodes along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, c_a, c_b) = (sa[0], sa[1], sb[1]);
        let plane = sa[2] * sa[3];
        let mut data = Vec::with_capacity((c_a + c_b) * batch * plane);
        for bi in 0..batch {
            data.extend_from_slice(&self.value(a).data()[bi * c_a * plane..(bi + 1) * c_a * plane]);
            data.extend_from_slice(&self.value(b).data()[bi * c_b * plane..(bi + 1) * c_b * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![batch, c_a + c_b, sa[2], sa[3]], data),
            false,
            needs,
            Op::ConcatChannels {
                a,
                b,
                c_a,
                c_b,
                plane,
                batch,
            },
        ))
    }

    /// Reshapes `[B, ...]` to `[B, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::BadShape {
                op: "flatten",
                expected: "[B, ...]".into(),
                got: shape,
            });
        }
        let rest: usize = shape[1..].iter().product();
        let value = Tensor::new(vec![shape[0], rest], self.value(a).data().to_vec());
        let needs = self.needs(a);
        Ok(self.push(value, false, needs, Op::Flatten(a)))
    }

    /// Mean over all elements, producing a scalar node.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = s::<S>(t.len() as f64);
        let total: S = t.iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total / n), false, needs, Op::Mean(a))
    }

    /// Mean cross-entropy between `[B,C]` logits and integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::BadShape {
                op: "softmax_cross_entropy",
                expected: format!("[{}, classes]", labels.len()),
                got: shape,
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes,
                    example: i,
                });
            }
        }
        let data = self.value(logits).data();
        let mut probs = vec![S::zero(); batch * classes];
        let mut total = S::zero();
        for b in 0..batch {
            let row = &data[b * classes..(b + 1) * classes];
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut sum = S::zero();
            for (p, &v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                let e = (v - max).exp();
                *p = e;
                sum = sum + e;
            }
            for p in &mut probs[b * classes..(b + 1) * classes] {
                *p = *p / sum;
            }
            // loss_b = logsumexp - logit_y
            total = total + sum.ln() + max - row[labels[b]];
        }
        let loss = total / s::<S>(batch as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            false,
            needs,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                classes,
            },
        ))
    }

    /// Elementwise sign; piecewise constant, so its backward rule
    /// contributes an all-zero gradient to the input.
    pub fn sign(&mut self, a: Var) -> Var {
        let value = self.value(a).sign();
        let needs = self.needs(a);
        self.push(value, false, needs, Op::Sign(a))
    }

    /// Elementwise clamp; gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        if lo > hi {
            return Err(Error::ClampBounds {
                lo: lo.to_f64_lossy(),
                hi: hi.to_f64_lossy(),
            });
        }
        let value = self.value(a).map(|v| clamp_value(v, lo, hi));
        let needs = self.needs(a);
        Ok(self.push(value, false, needs, Op::Clamp { x: a, lo, hi }))
    }

    /// Same values, excluded from gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, false, false, Op::Detach)
    }

    /// Index of the first example whose cross-entropy term is non-finite,
    /// when `loss` is a [`Graph::softmax_cross_entropy`] node.
    pub fn first_nonfinite_example(&self, loss: Var) -> usize {
        if let Op::SoftmaxCrossEntropy {
            labels,
            probs,
            classes,
            ..
        } = &self.nodes[loss.0].op
        {
            for (i, &label) in labels.iter().enumerate() {
                let per_example = -(probs[i * classes + label].ln());
                if !per_example.is_finite() {
                    return i;
                }
            }
        }
        0
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// `requires_grad` tensor reachable from `loss`; accumulation across
    /// shared subexpressions is additive.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarBackward(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
            if self.nodes[i].requires_grad {
                accumulate(&mut self.nodes[i].grad, &gout);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[S], grads: &mut Vec<Option<Vec<S>>>) {
        let touch = |grads: &mut Vec<Option<Vec<S>>>, v: Var, len: usize| {
            grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    if self.needs(v) {
                        add_into(grads, v, gout.iter().copied());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, gout.iter().copied());
                }
                if self.needs(*b) {
                    add_into(grads, *b, gout.iter().map(|&g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.nodes[b.0].value.data();
                    add_into(grads, *a, gout.iter().zip(bv).map(|(&g, &v)| g * v));
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].value.data();
                    add_into(grads, *b, gout.iter().zip(av).map(|(&g, &v)| g * v));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let c = *c;
                    add_into(grads, *a, gout.iter().map(|&g| g * c));
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let da = kernels::mm_a_bt(gout, self.nodes[b.0].value.data(), *m, *n, *k);
                    add_into(grads, *a, da.into_iter());
                }
                if self.needs(*b) {
                    let db = kernels::mm_at_b(self.nodes[a.0].value.data(), gout, *k, *m, *n);
                    add_into(grads, *b, db.into_iter());
                }
            }
            Op::AddRowBias { x, bias, rows, cols } => {
                if self.needs(*x) {
                    add_into(grads, *x, gout.iter().copied());
                }
                if self.needs(*bias) {
                    let mut db = vec![S::zero(); *cols];
                    for r in 0..*rows {
                        for (acc, &g) in db.iter_mut().zip(&gout[r * cols..(r + 1) * cols]) {
                            *acc = *acc + g;
                        }
                    }
                    add_into(grads, *bias, db.into_iter());
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    gout,
                    geom,
                );
                if self.needs(*x) {
                    add_into(grads, *x, dx.into_iter());
                }
                if self.needs(*w) {
                    add_into(grads, *w, dw.into_iter());
                }
                if let Some(bv) = bias {
                    if self.needs(*bv) {
                        add_into(grads, *bv, db.into_iter());
                    }
                }
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                training,
            } => {
                self.batchnorm_backward(
                    gout, *x, *gamma, *beta, mean, var, *eps, *training, grads,
                );
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let out = node.value.data();
                    add_into(
                        grads,
                        *a,
                        gout.iter()
                            .zip(out)
                            .map(|(&g, &o)| if o > S::zero() { g } else { S::zero() }),
                    );
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let out = node.value.data();
                    add_into(
                        grads,
                        *a,
                        gout.iter().zip(out).map(|(&g, &t)| g * (S::one() - t * t)),
                    );
                }
            }
            Op::ConcatChannels {
                a,
                b,
                c_a,
                c_b,
                plane,
                batch,
            } => {
                let stride = (c_a + c_b) * plane;
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(batch * c_a * plane);
                    for bi in 0..*batch {
                        da.extend_from_slice(&gout[bi * stride..bi * stride + c_a * plane]);
                    }
                    add_into(grads, *a, da.into_iter());
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(batch * c_b * plane);
                    for bi in 0..*batch {
                        db.extend_from_slice(
                            &gout[bi * stride + c_a * plane..(bi + 1) * stride],
                        );
                    }
                    add_into(grads, *b, db.into_iter());
                }
            }
            Op::Flatten(a) => {
                if self.needs(*a) {
                    add_into(grads, *a, gout.iter().copied());
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.len();
                    let g = gout[0] / s::<S>(n as f64);
                    add_into(grads, *a, std::iter::repeat(g).take(n));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                if self.needs(*logits) {
                    let batch = labels.len();
                    let inv_b = gout[0] / s::<S>(batch as f64);
                    let mut dl = probs.clone();
                    for (b, &label) in labels.iter().enumerate() {
                        dl[b * classes + label] = dl[b * classes + label] - S::one();
                    }
                    add_into(grads, *logits, dl.into_iter().map(|p| p * inv_b));
                }
            }
            Op::Sign(a) => {
                // Piecewise constant: allocate the input gradient so it is
                // present (all zeros) without contributing anything.
                if self.needs(*a) {
                    touch(grads, *a, self.nodes[a.0].value.len());
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let xv = self.nodes[x.0].value.data();
                    let (lo, hi) = (*lo, *hi);
                    add_into(
                        grads,
                        *x,
                        gout.iter()
                            .zip(xv)
                            .map(|(&g, &v)| if v > lo && v < hi { g } else { S::zero() }),
                    );
                }
            }
            Op::Detach => {}
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_backward(
        &self,
        gout: &[S],
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: S,
        training: bool,
        grads: &mut Vec<Option<Vec<S>>>,
    ) {
        let shape = self.nodes[x.0].value.shape();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let n = s::<S>((b * plane) as f64);
        let xdata = self.nodes[x.0].value.data();
        let gdata = self.nodes[gamma.0].value.data();

        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        let mut dx = if self.needs(x) {
            Some(vec![S::zero(); xdata.len()])
        } else {
            None
        };

        for ci in 0..c {
            let inv_std = (var[ci] + eps).sqrt().recip();
            let m_val = mean[ci];
            let g_scale = gdata[ci];

            // Channel reductions: sum(dy), sum(dy * xhat), sum(x - mean).
            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            let mut sum_centered = S::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for idx in base..base + plane {
                    let xhat = (xdata[idx] - m_val) * inv_std;
                    sum_dy = sum_dy + gout[idx];
                    sum_dy_xhat = sum_dy_xhat + gout[idx] * xhat;
                    sum_centered = sum_centered + (xdata[idx] - m_val);
                }
            }
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;

            if let Some(dx) = dx.as_mut() {
                if training {
                    // Differentiate through the batch statistics.
                    let dvar_coeff =
                        sum_dy_xhat * g_scale * (-s::<S>(0.5)) * inv_std * inv_std;
                    let dvar = dvar_coeff * inv_std;
                    let dmean = -sum_dy * g_scale * inv_std
                        + dvar * (-s::<S>(2.0)) * sum_centered / n;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for idx in base..base + plane {
                            let centered = xdata[idx] - m_val;
                            dx[idx] = dx[idx]
                                + gout[idx] * g_scale * inv_std
                                + dvar * s::<S>(2.0) * centered / n
                                + dmean / n;
                        }
                    }
                } else {
                    // Stats are constants in eval mode.
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for idx in base..base + plane {
                            dx[idx] = dx[idx] + gout[idx] * g_scale * inv_std;
                        }
                    }
                }
            }
        }

        if let Some(dx) = dx {
            add_into(grads, x, dx.into_iter());
        }
        if self.needs(gamma) {
            add_into(grads, gamma, dgamma.into_iter());
        }
        if self.needs(beta) {
            add_into(grads, beta, dbeta.into_iter());
        }
    }
}

fn add_into<S: Scalar>(
    grads: &mut Vec<Option<Vec<S>>>,
    v: Var,
    values: impl Iterator<Item = S>,
) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (acc, val) in buf.iter_mut().zip(values) {
                *acc = *acc + val;
            }
        }
        slot @ None => {
            *slot = Some(values.collect());
        }
    }
}

fn accumulate<S: Scalar>(target: &mut Option<Vec<S>>, src: &[S]) {
    match target {
        Some(buf) => {
            for (acc, &v) in buf.iter_mut().zip(src) {
                *acc = *acc + v;
            }
        }
        None => *target = Some(src.to_vec()),
    }
}
