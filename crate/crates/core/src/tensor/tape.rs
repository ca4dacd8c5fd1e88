//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles, in
//! creation order. [`Tape::backward`] walks the record once in reverse,
//! accumulating adjoints with explicit per-op formulas. Gradients are only
//! tracked through values created with [`Tape::param`]; everything built
//! purely from [`Tape::constant`] leaves carries no gradient and is skipped
//! wholesale during the sweep.
//!
//! Determinism: every backward formula accumulates in a fixed iteration
//! order (the same orders as the forward kernels), so a given graph always
//! produces bit-identical gradients.

use std::cell::{Cell, Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvSpec, ReducePlan, ResizeSpec};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Cheap to copy; only valid with
/// the tape that created it (enforced via a per-tape token).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    token: u64,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// Multiply every element of leading-axis slice `k` by `factors[k]`.
    ChannelScale(usize, Vec<f64>),
    Relu(usize),
    Abs(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        spec: ConvSpec,
    },
    BiasAdd {
        input: usize,
        bias: usize,
    },
    Resize {
        input: usize,
        spec: ResizeSpec,
    },
    Sum {
        input: usize,
        plan: ReducePlan,
    },
    Mean {
        input: usize,
        plan: ReducePlan,
    },
    Max {
        input: usize,
        /// Input linear index that produced each output element.
        argmax: Vec<usize>,
    },
    /// Concatenation along axis 0.
    Concat(Vec<usize>),
    Reshape(usize),
    CosineMap {
        features: usize,
        protos: usize,
        feat_norms: Vec<f64>,
        proto_norms: Vec<f64>,
    },
    /// Weighted spatial pool with constant weights and divisors; gradient
    /// flows to the features only.
    WeightedPool {
        features: usize,
        weights: Vec<f64>,
        divisors: Vec<f64>,
    },
    /// Mean binary cross-entropy on logits against constant targets.
    MultiLabelBce {
        logits: usize,
        targets: Vec<f64>,
    },
}

fn next_token() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// Operation recorder; all autodiff state lives here.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    token: u64,
    /// Multiplier applied to ReLU adjoints; 1.0 normally. A self-test hook
    /// used to verify that the finite-difference harness catches a broken
    /// backward formula.
    relu_skew: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            token: next_token(),
            relu_skew: Cell::new(1.0),
        }
    }

    /// Deliberately corrupts ReLU adjoints by `scale`. Exists so the
    /// derivative checker can prove it detects a wrong backward formula;
    /// never set this in real training.
    pub fn skew_relu_backward(&self, scale: f64) {
        self.relu_skew.set(scale);
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, opname: &'static str) -> Result<Var> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            id: nodes.len() - 1,
            token: self.token,
        })
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.token != self.token {
            return Err(Error::TapeMismatch);
        }
        Ok(var.id)
    }

    /// Untracked leaf: no gradient will flow to or through it unless it is
    /// combined with tracked values.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
            .expect("leaf values are pre-validated")
    }

    /// Tracked leaf; [`Gradients::get`] will have an entry for it after
    /// backward (zero-filled if unused by the loss).
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, "param")
            .expect("leaf values are pre-validated")
    }

    /// Clone of the current value of `var`.
    pub fn value(&self, var: Var) -> Result<Tensor> {
        let id = self.check(var)?;
        Ok(self.nodes.borrow()[id].value.clone())
    }

    pub fn shape(&self, var: Var) -> Result<Vec<usize>> {
        let id = self.check(var)?;
        Ok(self.nodes.borrow()[id].value.shape().to_vec())
    }

    fn values(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        opname: &'static str,
        make: impl FnOnce(usize, usize) -> Op,
        eval: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, needs) = {
            let nodes = self.values();
            (
                eval(&nodes[ia].value, &nodes[ib].value)?,
                nodes[ia].needs_grad || nodes[ib].needs_grad,
            )
        };
        self.push(value, make(ia, ib), needs, opname)
    }

    fn unary(
        &self,
        a: Var,
        opname: &'static str,
        make: impl FnOnce(usize) -> Op,
        eval: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, needs) = {
            let nodes = self.values();
            (eval(&nodes[ia].value)?, nodes[ia].needs_grad)
        };
        self.push(value, make(ia), needs, opname)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x.add(y))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x.sub(y))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x.mul(y))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", Op::AddScalar, |x| x.add_scalar(c))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "mul_scalar", |i| Op::MulScalar(i, c), |x| x.mul_scalar(c))
    }

    /// Scales slice `k` along axis 0 by `factors[k]`. The factors are
    /// constants as far as the gradient is concerned.
    pub fn channel_scale(&self, a: Var, factors: &[f64]) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, needs) = {
            let nodes = self.values();
            let t = &nodes[ia].value;
            if t.rank() == 0 || t.shape()[0] != factors.len() {
                return Err(Error::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: format!("channel_scale expects {} leading slices", factors.len()),
                });
            }
            if !factors.iter().all(|f| f.is_finite()) {
                return Err(Error::NonFinite { op: "channel_scale" });
            }
            let chunk = t.len() / factors.len().max(1);
            let mut data = t.data().to_vec();
            for (k, &f) in factors.iter().enumerate() {
                for v in &mut data[k * chunk..(k + 1) * chunk] {
                    *v *= f;
                }
            }
            (
                Tensor::from_parts(t.shape().to_vec(), data),
                nodes[ia].needs_grad,
            )
        };
        self.push(
            value,
            Op::ChannelScale(ia, factors.to_vec()),
            needs,
            "channel_scale",
        )
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, "relu", Op::Relu, |x| Ok(x.relu()))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, "abs", Op::Abs, |x| Ok(x.abs()))
    }

    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ii, ik) = (self.check(input)?, self.check(kernel)?);
        let (value, spec, needs) = {
            let nodes = self.values();
            let spec = ConvSpec::new(
                nodes[ii].value.shape(),
                nodes[ik].value.shape(),
                stride,
                pad,
            )?;
            let value = kernels::conv2d_forward(&spec, nodes[ii].value.data(), nodes[ik].value.data());
            (value, spec, nodes[ii].needs_grad || nodes[ik].needs_grad)
        };
        self.push(
            value,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                spec,
            },
            needs,
            "conv2d",
        )
    }

    /// `input` is `[C,H,W]`, `bias` is `[C]`; adds `bias[c]` to every element
    /// of channel `c`.
    pub fn bias_add(&self, input: Var, bias: Var) -> Result<Var> {
        let (ii, ib) = (self.check(input)?, self.check(bias)?);
        let (value, needs) = {
            let nodes = self.values();
            let x = &nodes[ii].value;
            let b = &nodes[ib].value;
            if x.rank() != 3 || b.rank() != 1 || b.len() != x.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "bias_add",
                    left: x.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let chunk = x.shape()[1] * x.shape()[2];
            let mut data = x.data().to_vec();
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut data[c * chunk..(c + 1) * chunk] {
                    *v += bv;
                }
            }
            (
                Tensor::from_parts(x.shape().to_vec(), data),
                nodes[ii].needs_grad || nodes[ib].needs_grad,
            )
        };
        self.push(value, Op::BiasAdd { input: ii, bias: ib }, needs, "bias_add")
    }

    pub fn resize_bilinear(&self, a: Var, height: usize, width: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, spec, needs) = {
            let nodes = self.values();
            let spec = ResizeSpec::new(nodes[ia].value.shape(), height, width)?;
            let value = kernels::resize_forward(&spec, nodes[ia].value.data());
            (value, spec, nodes[ia].needs_grad)
        };
        self.push(value, Op::Resize { input: ia, spec }, needs, "resize_bilinear")
    }

    /// Sum over `axes` (all axes when empty).
    pub fn sum(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, plan, needs) = {
            let nodes = self.values();
            let plan = ReducePlan::new(nodes[ia].value.shape(), axes)?;
            (plan.sum(nodes[ia].value.data()), plan, nodes[ia].needs_grad)
        };
        self.push(value, Op::Sum { input: ia, plan }, needs, "sum")
    }

    pub fn mean(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, plan, needs) = {
            let nodes = self.values();
            let plan = ReducePlan::new(nodes[ia].value.shape(), axes)?;
            (plan.mean(nodes[ia].value.data()), plan, nodes[ia].needs_grad)
        };
        self.push(value, Op::Mean { input: ia, plan }, needs, "mean")
    }

    /// Max over `axes`; gradient routes to the first maximal element of each
    /// reduced group.
    pub fn max(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, argmax, needs) = {
            let nodes = self.values();
            let plan = ReducePlan::new(nodes[ia].value.shape(), axes)?;
            let (value, argmax) = plan.max(nodes[ia].value.data());
            (value, argmax, nodes[ia].needs_grad)
        };
        self.push(value, Op::Max { input: ia, argmax }, needs, "max")
    }

    /// Concatenates along axis 0; all inputs must share trailing dimensions.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![],
                reason: "concat needs at least one input".into(),
            });
        }
        let ids = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let (value, needs) = {
            let nodes = self.values();
            let first = nodes[ids[0]].value.shape();
            if first.is_empty() {
                return Err(Error::InvalidShape {
                    shape: first.to_vec(),
                    reason: "concat inputs must have rank >= 1".into(),
                });
            }
            let tail = &first[1..];
            let mut total = 0usize;
            for &id in &ids {
                let s = nodes[id].value.shape();
                if s.is_empty() || &s[1..] != tail {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: first.to_vec(),
                        right: s.to_vec(),
                    });
                }
                total += s[0];
            }
            let mut shape = vec![total];
            shape.extend_from_slice(tail);
            let mut data = Vec::with_capacity(shape.iter().product());
            for &id in &ids {
                data.extend_from_slice(nodes[id].value.data());
            }
            (
                Tensor::from_parts(shape, data),
                ids.iter().any(|&id| nodes[id].needs_grad),
            )
        };
        self.push(value, Op::Concat(ids), needs, "concat")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, "reshape", Op::Reshape, |x| x.reshape(shape))
    }

    /// Cosine similarity of every (row of `protos`, pixel of `features`)
    /// pair. `features` is `[C,n]`, `protos` is `[P,C]`; result is `[P,n]`,
    /// clamped to `[-1,1]`, zero where either norm vanishes.
    pub fn cosine_map(&self, features: Var, protos: Var) -> Result<Var> {
        let (if_, ip) = (self.check(features)?, self.check(protos)?);
        let (value, feat_norms, proto_norms, needs) = {
            let nodes = self.values();
            let f = &nodes[if_].value;
            let p = &nodes[ip].value;
            if f.rank() != 2 || p.rank() != 2 || f.shape()[0] != p.shape()[1] {
                return Err(Error::ShapeMismatch {
                    op: "cosine_map",
                    left: f.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            let (channels, pixels) = (f.shape()[0], f.shape()[1]);
            let rows = p.shape()[0];
            let (out, feat_norms, proto_norms) =
                kernels::cosine_map_forward(channels, pixels, rows, f.data(), p.data());
            (
                Tensor::from_parts(vec![rows, pixels], out),
                feat_norms,
                proto_norms,
                nodes[if_].needs_grad || nodes[ip].needs_grad,
            )
        };
        self.push(
            value,
            Op::CosineMap {
                features: if_,
                protos: ip,
                feat_norms,
                proto_norms,
            },
            needs,
            "cosine_map",
        )
    }

    /// Per-row weighted mean over pixels: `out[k,c] = Σ_j w[k,j]·f[c,j] /
    /// divisors[k]`. Weights and divisors are constants; the gradient flows
    /// to `features` only.
    pub fn weighted_pool(&self, features: Var, weights: &Tensor, divisors: &[f64]) -> Result<Var> {
        let if_ = self.check(features)?;
        let (value, needs) = {
            let nodes = self.values();
            let f = &nodes[if_].value;
            if f.rank() != 2 || weights.rank() != 2 || weights.shape()[1] != f.shape()[1] {
                return Err(Error::ShapeMismatch {
                    op: "weighted_pool",
                    left: f.shape().to_vec(),
                    right: weights.shape().to_vec(),
                });
            }
            let rows = weights.shape()[0];
            if divisors.len() != rows {
                return Err(Error::InvalidShape {
                    shape: vec![divisors.len()],
                    reason: format!("weighted_pool expects {rows} divisors"),
                });
            }
            if !divisors.iter().all(|d| d.is_finite() && *d > 0.0) {
                return Err(Error::InvalidShape {
                    shape: vec![divisors.len()],
                    reason: "weighted_pool divisors must be positive and finite".into(),
                });
            }
            let (channels, pixels) = (f.shape()[0], f.shape()[1]);
            let out = kernels::weighted_pool_forward(
                channels,
                pixels,
                rows,
                f.data(),
                weights.data(),
                divisors,
            );
            (
                Tensor::from_parts(vec![rows, channels], out),
                nodes[if_].needs_grad,
            )
        };
        self.push(
            value,
            Op::WeightedPool {
                features: if_,
                weights: weights.data().to_vec(),
                divisors: divisors.to_vec(),
            },
            needs,
            "weighted_pool",
        )
    }

    /// Mean over classes of the stable binary cross-entropy between
    /// `sigmoid(logits)` and constant targets in `[0,1]`:
    /// `L = (1/K) Σ_k y_k·softplus(-z_k) + (1-y_k)·softplus(z_k)`.
    pub fn multi_label_bce(&self, logits: Var, targets: &[f64]) -> Result<Var> {
        let il = self.check(logits)?;
        let (value, needs) = {
            let nodes = self.values();
            let z = &nodes[il].value;
            if z.rank() != 1 || z.len() != targets.len() || targets.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: "multi_label_bce",
                    left: z.shape().to_vec(),
                    right: vec![targets.len()],
                });
            }
            for &y in targets {
                if !(0.0..=1.0).contains(&y) {
                    return Err(Error::OutOfRange {
                        op: "multi_label_bce",
                        side: "target",
                        value: y,
                    });
                }
            }
            let k = targets.len() as f64;
            let mut loss = 0.0;
            for (&zv, &y) in z.data().iter().zip(targets) {
                loss += y * kernels::softplus(-zv) + (1.0 - y) * kernels::softplus(zv);
            }
            (Tensor::scalar(loss / k), nodes[il].needs_grad)
        };
        self.push(
            value,
            Op::MultiLabelBce {
                logits: il,
                targets: targets.to_vec(),
            },
            needs,
            "multi_label_bce",
        )
    }

    /// Runs the reverse sweep from a tracked scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let nodes_ref = self.values();
        let nodes: &[Node] = &nodes_ref;
        if !nodes[il].value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: nodes[il].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[il] = Some(vec![1.0]);

        // Lazily materialises the adjoint buffer for node `id`. `grads` and
        // `nodes` are disjoint, so node values stay readable while an
        // adjoint buffer is borrowed.
        fn buf<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node],
            id: usize,
        ) -> &'g mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()])
        }

        for id in (0..nodes.len()).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].needs_grad;
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        for (d, &gv) in buf(&mut grads, nodes, *a).iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    if needs(*b) {
                        for (d, &gv) in buf(&mut grads, nodes, *b).iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        for (d, &gv) in buf(&mut grads, nodes, *a).iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    if needs(*b) {
                        for (d, &gv) in buf(&mut grads, nodes, *b).iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let other = nodes[*b].value.data();
                        let dst = buf(&mut grads, nodes, *a);
                        for i in 0..g.len() {
                            dst[i] += g[i] * other[i];
                        }
                    }
                    if needs(*b) {
                        let other = nodes[*a].value.data();
                        let dst = buf(&mut grads, nodes, *b);
                        for i in 0..g.len() {
                            dst[i] += g[i] * other[i];
                        }
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    if needs(*a) {
                        for (d, &gv) in buf(&mut grads, nodes, *a).iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::MulScalar(a, c) => {
                    if needs(*a) {
                        let c = *c;
                        for (d, &gv) in buf(&mut grads, nodes, *a).iter_mut().zip(&g) {
                            *d += gv * c;
                        }
                    }
                }
                Op::ChannelScale(a, factors) => {
                    if needs(*a) {
                        let chunk = g.len() / factors.len();
                        let dst = buf(&mut grads, nodes, *a);
                        for (k, &f) in factors.iter().enumerate() {
                            for i in k * chunk..(k + 1) * chunk {
                                dst[i] += g[i] * f;
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    if needs(*a) {
                        let skew = self.relu_skew.get();
                        let x = nodes[*a].value.data();
                        let dst = buf(&mut grads, nodes, *a);
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                dst[i] += g[i] * skew;
                            }
                        }
                    }
                }
                Op::Abs(a) => {
                    if needs(*a) {
                        let x = nodes[*a].value.data();
                        let dst = buf(&mut grads, nodes, *a);
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                dst[i] += g[i];
                            } else if x[i] < 0.0 {
                                dst[i] -= g[i];
                            }
                        }
                    }
                }
                Op::Conv2d { input, kernel, spec } => {
                    if needs(*input) {
                        let ker = nodes[*kernel].value.data();
                        let dst = buf(&mut grads, nodes, *input);
                        kernels::conv2d_grad_input(spec, ker, &g, dst);
                    }
                    if needs(*kernel) {
                        let inp = nodes[*input].value.data();
                        let dst = buf(&mut grads, nodes, *kernel);
                        kernels::conv2d_grad_kernel(spec, inp, &g, dst);
                    }
                }
                Op::BiasAdd { input, bias } => {
                    if needs(*input) {
                        for (d, &gv) in buf(&mut grads, nodes, *input).iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    if needs(*bias) {
                        let channels = nodes[*bias].value.len();
                        let chunk = g.len() / channels;
                        let dst = buf(&mut grads, nodes, *bias);
                        for c in 0..channels {
                            let mut acc = 0.0;
                            for &gv in &g[c * chunk..(c + 1) * chunk] {
                                acc += gv;
                            }
                            dst[c] += acc;
                        }
                    }
                }
                Op::Resize { input, spec } => {
                    if needs(*input) {
                        let dst = buf(&mut grads, nodes, *input);
                        kernels::resize_backward(spec, &g, dst);
                    }
                }
                Op::Sum { input, plan } => {
                    if needs(*input) {
                        let dst = buf(&mut grads, nodes, *input);
                        plan.backward_sum(&g, dst);
                    }
                }
                Op::Mean { input, plan } => {
                    if needs(*input) {
                        let dst = buf(&mut grads, nodes, *input);
                        plan.backward_mean(&g, dst);
                    }
                }
                Op::Max { input, argmax } => {
                    if needs(*input) {
                        let dst = buf(&mut grads, nodes, *input);
                        for (o, &src) in argmax.iter().enumerate() {
                            dst[src] += g[o];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0usize;
                    for &part in parts {
                        let len = nodes[part].value.len();
                        if needs(part) {
                            let dst = buf(&mut grads, nodes, part);
                            for (d, &gv) in dst.iter_mut().zip(&g[offset..offset + len]) {
                                *d += gv;
                            }
                        }
                        offset += len;
                    }
                }
                Op::CosineMap {
                    features,
                    protos,
                    feat_norms,
                    proto_norms,
                } => {
                    let (if_, ip) = (*features, *protos);
                    let fshape = nodes[if_].value.shape();
                    let (channels, pixels) = (fshape[0], fshape[1]);
                    let rows = nodes[ip].value.shape()[0];
                    // Both adjoints go into scratch first; only tracked
                    // inputs receive them.
                    let mut gf = vec![0.0; channels * pixels];
                    let mut gp = vec![0.0; rows * channels];
                    kernels::cosine_map_backward(
                        channels,
                        pixels,
                        rows,
                        nodes[if_].value.data(),
                        nodes[ip].value.data(),
                        feat_norms,
                        proto_norms,
                        &g,
                        &mut gf,
                        &mut gp,
                    );
                    if needs(if_) {
                        for (d, gv) in buf(&mut grads, nodes, if_).iter_mut().zip(gf) {
                            *d += gv;
                        }
                    }
                    if needs(ip) {
                        for (d, gv) in buf(&mut grads, nodes, ip).iter_mut().zip(gp) {
                            *d += gv;
                        }
                    }
                }
                Op::WeightedPool {
                    features,
                    weights,
                    divisors,
                } => {
                    if needs(*features) {
                        let fshape = nodes[*features].value.shape();
                        let (channels, pixels) = (fshape[0], fshape[1]);
                        let rows = divisors.len();
                        let dst = buf(&mut grads, nodes, *features);
                        kernels::weighted_pool_backward(
                            channels, pixels, rows, weights, divisors, &g, dst,
                        );
                    }
                }
                Op::MultiLabelBce { logits, targets } => {
                    if needs(*logits) {
                        let z = nodes[*logits].value.data();
                        let k = targets.len() as f64;
                        let g0 = g[0];
                        let dst = buf(&mut grads, nodes, *logits);
                        for (i, (&zv, &y)) in z.iter().zip(targets).enumerate() {
                            dst[i] += g0 * (kernels::sigmoid(zv) - y) / k;
                        }
                    }
                }
            }
        }

        // Keep only leaf adjoints; interior buffers were consumed above.
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (Op::Leaf, None) if node.needs_grad => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            token: self.token,
            grads,
        })
    }
}

/// Result of a backward sweep: one adjoint tensor per tracked leaf.
pub struct Gradients {
    token: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Result<&Tensor> {
        if var.token != self.token {
            return Err(Error::TapeMismatch);
        }
        self.grads
            .get(var.id)
            .and_then(|g| g.as_ref())
            .ok_or(Error::UntrackedParam { index: var.id })
    }

    pub fn take(&mut self, var: Var) -> Result<Tensor> {
        if var.token != self.token {
            return Err(Error::TapeMismatch);
        }
        self.grads
            .get_mut(var.id)
            .and_then(|g| g.take())
            .ok_or(Error::UntrackedParam { index: var.id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(tape: &Tape, v: f64) -> Var {
        tape.param(Tensor::scalar(v))
    }

    #[test]
    fn add_mul_chain() {
        let tape = Tape::new();
        let a = scalar_param(&tape, 2.0);
        let b = scalar_param(&tape, 3.0);
        // loss = (a + b) * a = a^2 + ab → dL/da = 2a + b = 7, dL/db = a = 2
        let s = tape.add(a, b).unwrap();
        let loss = tape.mul(s, a).unwrap();
        assert_eq!(tape.value(loss).unwrap().item(), 10.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 7.0);
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_track_nothing() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let p = scalar_param(&tape, 2.0);
        let loss = tape.mul(c, p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 4.0);
        assert!(matches!(
            grads.get(c),
            Err(Error::UntrackedParam { .. })
        ));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let tape = Tape::new();
        let used = scalar_param(&tape, 1.0);
        let unused = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = tape.mul(used, used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gates_gradient() {
        let tape = Tape::new();
        let p = tape.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(p).unwrap();
        let loss = tape.sum(r, &[]).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Zero input sits on the kink; its subgradient here is 0.
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn abs_sign_routing() {
        let tape = Tape::new();
        let p = tape.param(Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap());
        let a = tape.abs(p).unwrap();
        let loss = tape.sum(a, &[]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn max_routes_to_first_tie() {
        let tape = Tape::new();
        let p = tape.param(Tensor::new(vec![4], vec![1.0, 5.0, 5.0, 0.0]).unwrap());
        let m = tape.max(p, &[]).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_spreads_gradient() {
        let tape = Tape::new();
        let p = tape.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = tape.mean(p, &[]).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c).unwrap(), vec![3, 2]);
        let w = tape.channel_scale(c, &[1.0, 2.0, 3.0]).unwrap();
        let loss = tape.sum(w, &[]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let tape = Tape::new();
        let z = tape.param(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let loss = tape.multi_label_bce(z, &[1.0, 0.0]).unwrap();
        let v = tape.value(loss).unwrap().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        // (sigmoid(0) - y)/K = (0.5 - 1)/2 and (0.5 - 0)/2
        assert_eq!(grads.get(z).unwrap().data(), &[-0.25, 0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let p = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(p),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn cross_tape_vars_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = scalar_param(&t1, 1.0);
        let b = scalar_param(&t2, 2.0);
        assert!(matches!(t1.add(a, b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn skewed_relu_backward_is_wrong_on_purpose() {
        let tape = Tape::new();
        tape.skew_relu_backward(2.0);
        let p = scalar_param(&tape, 3.0);
        let r = tape.relu(p).unwrap();
        let grads = tape.backward(r).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}
