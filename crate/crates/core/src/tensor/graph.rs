use std::cell::{Cell, Ref, RefCell};

use serde::{Deserialize, Serialize};

use super::kernels::{self, MatRef};
use super::{broadcast_shape, swap_last_two, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// GELU flavour. `Exact` uses the error function; `Tanh` is the usual approximation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluKind {
    #[default]
    Exact,
    Tanh,
}

/// Deliberate defects for mutation-testing the gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default)]
pub struct FaultInjection {
    /// Drop the `x·φ(x)` term from the GELU derivative.
    pub gelu_derivative: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Softmax(Var, usize),
    Gelu(Var, GeluKind),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Mean(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids grow with each recorded op, so every node's inputs precede it and
/// [`Graph::backward`] can walk ids in descending order.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(usize, Var)>>,
    recording: bool,
    faults: Cell<FaultInjection>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            recording: true,
            faults: Cell::new(FaultInjection::default()),
        }
    }

    /// A graph that keeps no backward state; `backward` on it is an error.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn inject_faults(&self, faults: FaultInjection) {
        self.faults.set(faults);
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad: requires_grad && self.recording,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        self.recording && vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn check_finite(&self, inputs: &[Var], out: &Tensor<T>, op: &str) {
        if cfg!(debug_assertions) && !out.is_finite() {
            let nodes = self.nodes.borrow();
            let inputs_finite = inputs.iter().all(|v| nodes[v.0].value.is_finite());
            debug_assert!(!inputs_finite, "{op} produced non-finite output from finite inputs");
        }
    }

    /// Input that takes no gradient (images, labels-derived constants).
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Input whose gradient is wanted.
    pub fn variable(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf bound to entry `index` of a parameter store.
    pub fn param(&self, index: usize, value: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.params.borrow_mut().push((index, v));
        v
    }

    /// `(store index, var)` for every parameter leaf recorded so far.
    pub fn param_leaves(&self) -> Vec<(usize, Var)> {
        self.params.borrow().clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(ta.shape(), tb.shape())
                .map_err(|_| Error::shape(name, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())))?;
            let data = kernels::broadcast_binary(ta.data(), ta.shape(), tb.data(), tb.shape(), &shape, f);
            Tensor { shape, data }
        };
        self.check_finite(&[a, b], &out, name);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(op(a, b), out, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Hadamard product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.needs_grad(&[a]);
        self.push(Op::Scale(a, s), out, rg)
    }

    /// Batched matrix product over the two trailing axes; leading axes broadcast.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            matmul_forward(&nodes[a.0].value, &nodes[b.0].value)?
        };
        self.check_finite(&[a, b], &out, "matmul");
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Op::Permute(a, axes.to_vec()), out, rg))
    }

    /// Swap the two trailing axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let axes = swap_last_two(self.value(a).rank(), "transpose")?;
        self.permute(a, &axes)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let full = broadcast_shape(t.shape(), shape)?;
            if full != shape {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{:?} does not broadcast to {shape:?}", t.shape()),
                ));
            }
            let zeros = vec![T::ZERO; 1];
            let data = kernels::broadcast_binary(t.data(), t.shape(), &zeros, &[1], shape, |x, _| x);
            Tensor {
                shape: shape.to_vec(),
                data,
            }
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Op::BroadcastTo(a), out, rg))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if axis >= t.rank() {
                return Err(Error::shape(
                    "softmax",
                    format!("axis {axis} out of range for shape {:?}", t.shape()),
                ));
            }
            Tensor {
                shape: t.shape().to_vec(),
                data: kernels::softmax_axis(t.data(), t.shape(), axis),
            }
        };
        self.check_finite(&[a], &out, "softmax");
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Op::Softmax(a, axis), out, rg))
    }

    pub fn gelu(&self, a: Var, kind: GeluKind) -> Var {
        let out = match kind {
            GeluKind::Exact => self.value(a).map(kernels::gelu_exact),
            GeluKind::Tanh => self.value(a).map(kernels::gelu_tanh),
        };
        let rg = self.needs_grad(&[a]);
        self.push(Op::Gelu(a, kind), out, rg)
    }

    /// Normalize over the last axis with biased variance, then apply `gamma`, `beta`.
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let d = *tx.shape().last().ok_or_else(|| Error::shape("layernorm", "rank-0 input"))?;
            if tg.shape() != [d] || tb.shape() != [d] {
                return Err(Error::shape(
                    "layernorm",
                    format!(
                        "gamma {:?} / beta {:?} must both be [{d}] for input {:?}",
                        tg.shape(),
                        tb.shape(),
                        tx.shape()
                    ),
                ));
            }
            let rows = tx.len() / d;
            let n = T::from_usize(d);
            let eps = T::from_f64(eps);
            let mut out = vec![T::ZERO; tx.len()];
            let mut xhat = if rg { vec![T::ZERO; tx.len()] } else { Vec::new() };
            let mut inv_std = if rg { vec![T::ZERO; rows] } else { Vec::new() };
            for r in 0..rows {
                let row = &tx.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let istd = T::ONE / (var + eps).sqrt();
                for j in 0..d {
                    let h = (row[j] - mean) * istd;
                    out[r * d + j] = h * tg.data()[j] + tb.data()[j];
                    if rg {
                        xhat[r * d + j] = h;
                    }
                }
                if rg {
                    inv_std[r] = istd;
                }
            }
            (
                Tensor {
                    shape: tx.shape().to_vec(),
                    data: out,
                },
                xhat,
                inv_std,
            )
        };
        self.check_finite(&[x, gamma, beta], &out, "layernorm");
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            rg,
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if axis >= t.rank() {
                return Err(Error::shape(
                    "mean",
                    format!("axis {axis} out of range for shape {:?}", t.shape()),
                ));
            }
            let (outer, n, inner) = kernels::axis_split(t.shape(), axis);
            let scale = T::ONE / T::from_usize(n);
            let mut data = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let src = &t.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            for d in &mut data {
                *d *= scale;
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor { shape, data }
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Op::Mean(a, axis), out, rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs_grad(&[a]);
        self.push(Op::Sum(a), out, rg)
    }

    /// Mean softmax cross-entropy of `logits[b, C]` against integer labels,
    /// evaluated through the log-sum-exp form.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let rg = self.needs_grad(&[logits]);
        let (loss, probs) = {
            let t = self.value(logits);
            let &[b, c] = t.shape() else {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits must be [batch, classes], got {:?}", t.shape()),
                ));
            };
            if labels.len() != b {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{} labels for batch of {b}", labels.len()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::LabelOutOfRange { label: bad, classes: c });
            }
            let probs = kernels::softmax_axis(t.data(), t.shape(), 1);
            let mut total = 0.0f64;
            for (r, &label) in labels.iter().enumerate() {
                let row = &t.data()[r * c..(r + 1) * c];
                let max = row.iter().copied().fold(row[0], T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                total += (lse - row[label]).to_f64();
            }
            (T::from_f64(total / b as f64), if rg { probs } else { Vec::new() })
        };
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        let faults = self.faults.get();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            let out_shape = node.value.shape();
            let wants = |v: Var| nodes[v.0].requires_grad;
            let mut send = |v: Var, delta: Vec<T>| accumulate(&mut grads[v.0], delta);

            match &node.op {
                // Leaves keep their gradient; interior buffers are released as the sweep passes.
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    if wants(*a) {
                        send(*a, kernels::reduce_to_shape(&g, out_shape, nodes[a.0].value.shape()));
                    }
                    if wants(*b) {
                        let mut d = kernels::reduce_to_shape(&g, out_shape, nodes[b.0].value.shape());
                        if negate {
                            d.iter_mut().for_each(|v| *v = -*v);
                        }
                        send(*b, d);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if wants(*a) {
                        let full = kernels::broadcast_binary(&g, out_shape, tb.data(), tb.shape(), out_shape, |x, y| x * y);
                        send(*a, kernels::reduce_to_shape(&full, out_shape, ta.shape()));
                    }
                    if wants(*b) {
                        let full = kernels::broadcast_binary(&g, out_shape, ta.data(), ta.shape(), out_shape, |x, y| x * y);
                        send(*b, kernels::reduce_to_shape(&full, out_shape, tb.shape()));
                    }
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|&v| v * *s).collect()),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (da, db) = matmul_backward(ta, tb, &g, wants(*a), wants(*b));
                    if let Some(da) = da {
                        send(*a, da);
                    }
                    if let Some(db) = db {
                        send(*b, db);
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let gt = Tensor {
                        shape: out_shape.to_vec(),
                        data: g,
                    };
                    send(*a, gt.permute(&inverse)?.into_data());
                }
                Op::Reshape(a) => send(*a, g),
                Op::BroadcastTo(a) => {
                    send(*a, kernels::reduce_to_shape(&g, out_shape, nodes[a.0].value.shape()));
                }
                Op::Softmax(a, axis) => {
                    send(
                        *a,
                        kernels::softmax_axis_backward(node.value.data(), &g, out_shape, *axis),
                    );
                }
                Op::Gelu(a, kind) => {
                    let x = nodes[a.0].value.data();
                    let d: Vec<T> = match (kind, faults.gelu_derivative) {
                        (_, true) => x
                            .iter()
                            .zip(&g)
                            .map(|(&x, &g)| {
                                let cdf = T::from_f64(0.5)
                                    * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
                                g * cdf
                            })
                            .collect(),
                        (GeluKind::Exact, false) => {
                            x.iter().zip(&g).map(|(&x, &g)| g * kernels::gelu_exact_grad(x)).collect()
                        }
                        (GeluKind::Tanh, false) => {
                            x.iter().zip(&g).map(|(&x, &g)| g * kernels::gelu_tanh_grad(x)).collect()
                        }
                    };
                    send(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = nodes[gamma.0].value.data();
                    let d = gam.len();
                    let rows = g.len() / d;
                    if wants(*gamma) {
                        let mut dg = vec![T::ZERO; d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                        send(*gamma, dg);
                    }
                    if wants(*beta) {
                        send(*beta, kernels::reduce_to_shape(&g, out_shape, &[d]));
                    }
                    if wants(*x) {
                        let n = T::from_usize(d);
                        let mut dx = vec![T::ZERO; g.len()];
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut sum_dh = T::ZERO;
                            let mut sum_dh_h = T::ZERO;
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            let k = inv_std[r] / n;
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                dx[r * d + j] = k * (n * dh - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Mean(a, axis) => {
                    let in_shape = nodes[a.0].value.shape();
                    let (outer, n, inner) = kernels::axis_split(in_shape, *axis);
                    let scale = T::ONE / T::from_usize(n);
                    let mut d = vec![T::ZERO; outer * n * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                d[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    send(*a, d);
                }
                Op::Sum(a) => send(*a, vec![g[0]; nodes[a.0].value.len()]),
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / T::from_usize(labels.len());
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * c + l] -= scale;
                    }
                    send(*logits, d);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf; zeros when the leaf was
    /// not reached. Interior nodes always report zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: shape.clone(),
                data: g.clone(),
            },
            _ => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn split_matrix_shape<'a>(shape: &'a [usize], which: &str, other: &[usize]) -> Result<(&'a [usize], usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("{which} operand {shape:?} must have rank >= 2 (other operand {other:?})"),
        ));
    }
    let r = shape.len();
    Ok((&shape[..r - 2], shape[r - 2], shape[r - 1]))
}

struct MatmulPlan {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn matmul_plan(sa: &[usize], sb: &[usize]) -> Result<MatmulPlan> {
    let (ba, m, k) = split_matrix_shape(sa, "left", sb)?;
    let (bb, k2, n) = split_matrix_shape(sb, "right", sa)?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {sa:?} x {sb:?}"),
        ));
    }
    let batch = broadcast_shape(ba, bb).map_err(|_| {
        Error::shape(
            "matmul",
            format!("batch dimensions of {sa:?} and {sb:?} do not broadcast"),
        )
    })?;
    let offsets = |own: &[usize], mat: usize| {
        let st = super::broadcast_strides(own, &batch);
        let mut offs = Vec::new();
        super::for_each_offset(&batch, &st, |o| offs.push(o * mat));
        offs
    };
    let a_offsets = offsets(ba, m * k);
    let b_offsets = offsets(bb, k * n);
    Ok(MatmulPlan {
        batch,
        m,
        k,
        n,
        a_offsets,
        b_offsets,
    })
}

pub(crate) fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut shape = plan.batch.clone();
    shape.extend([m, n]);
    if b.rank() == 2 {
        // Fold every leading axis of `a` into the row dimension: one large product.
        let rows = a.len() / k;
        let mut out = vec![T::ZERO; rows * n];
        kernels::gemm(MatRef::new(a.data(), rows, k), MatRef::new(b.data(), k, n), &mut out, false);
        return Ok(Tensor { shape, data: out });
    }
    let slices = plan.a_offsets.len();
    let mut out = vec![T::ZERO; slices * m * n];
    for (s, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        kernels::gemm(
            MatRef::new(&a.data()[ao..ao + m * k], m, k),
            MatRef::new(&b.data()[bo..bo + k * n], k, n),
            &mut out[s * m * n..(s + 1) * m * n],
            false,
        );
    }
    Ok(Tensor { shape, data: out })
}

fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plan = matmul_plan(a.shape(), b.shape()).expect("shapes validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut da = want_a.then(|| vec![T::ZERO; a.len()]);
    let mut db = want_b.then(|| vec![T::ZERO; b.len()]);
    if b.rank() == 2 {
        let rows = a.len() / k;
        if let Some(da) = da.as_mut() {
            kernels::gemm(MatRef::new(g, rows, n), MatRef::new(b.data(), k, n).t(), da, false);
        }
        if let Some(db) = db.as_mut() {
            kernels::gemm(MatRef::new(a.data(), rows, k).t(), MatRef::new(g, rows, n), db, false);
        }
        return (da, db);
    }
    for (s, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        let gs = &g[s * m * n..(s + 1) * m * n];
        if let Some(da) = da.as_mut() {
            kernels::gemm(
                MatRef::new(gs, m, n),
                MatRef::new(&b.data()[bo..bo + k * n], k, n).t(),
                &mut da[ao..ao + m * k],
                true,
            );
        }
        if let Some(db) = db.as_mut() {
            kernels::gemm(
                MatRef::new(&a.data()[ao..ao + m * k], m, k).t(),
                MatRef::new(gs, m, n),
                &mut db[bo..bo + k * n],
                true,
            );
        }
    }
    (da, db)
}
