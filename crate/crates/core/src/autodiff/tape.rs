//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node that
//! remembers its inputs. [`Tape::backward`] walks the nodes once in reverse
//! recording order, which is a valid reverse topological order because a node
//! can only reference nodes recorded before it.
//!
//! ```
//! use ieor::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![2.0, 3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[4.0, 6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    ChannelBias(usize, usize),
    RowBias(usize, usize),
    ChannelScale(usize, usize),
    Relu(usize),
    AvgPool2(usize),
    GlobalAvgPool(usize),
    Clip01(usize),
    Exp(usize),
    Acos(usize),
    Reshape(usize),
    Sum(usize),
    CosineSimilarity(usize, usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward/backward pass.
///
/// A tape is single-use: a second call to [`Tape::backward`] is rejected.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::param`]. `None` for constants,
    /// interior nodes, and leaves the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} and {:?} are neither equal nor scalar", a.shape(), b.shape()),
        ))
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.is_scalar() && !b.is_scalar(), b.is_scalar() && !a.is_scalar()) {
        (true, _) => {
            let s = a.data()[0];
            b.data().iter().map(|&y| f(s, y)).collect()
        }
        (_, true) => {
            let s = b.data()[0];
            a.data().iter().map(|&x| f(x, s)).collect()
        }
        _ => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Reduces an incoming gradient to the shape of a possibly-broadcast operand.
fn unbroadcast(g: Vec<f64>, operand: &Tensor) -> Vec<f64> {
    if operand.is_scalar() && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn spatial_split(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 dims, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        if self.consumed.get() {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        Ok(v.index)
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let i = self.check_owned(v)?;
        Ok(self.nodes.borrow()[i].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let i = self.check_owned(v)?;
        Ok(self.nodes.borrow()[i].value.shape().to_vec())
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let i = self.check_owned(v)?;
        self.nodes.borrow()[i].value.item()
    }

    fn check_owned(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        Ok(v.index)
    }

    fn unary(&self, x: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let i = self.check(x)?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[i].value)?, nodes[i].requires_grad)
        };
        Ok(self.push(value, op(i), rg))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (i, j) = (self.check(a)?, self.check(b)?);
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let v = f(&nodes[i].value, &nodes[j].value)?;
            (v, nodes[i].requires_grad || nodes[j].requires_grad)
        };
        Ok(self.push(value, op(i, j), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| Tensor::new(same_or_scalar("add", x, y)?, broadcast_binary(x, y, |p, q| p + q)),
            Op::Add,
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| Tensor::new(same_or_scalar("sub", x, y)?, broadcast_binary(x, y, |p, q| p - q)),
            Op::Sub,
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| Tensor::new(same_or_scalar("mul", x, y)?, broadcast_binary(x, y, |p, q| p * q)),
            Op::Mul,
        )
    }

    pub fn scalar_mul(&self, a: Var, s: f64) -> Result<Var> {
        self.unary(
            a,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect()),
            |i| Op::ScalarMul(i, s),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(
            a,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect()),
            Op::AddScalar,
        )
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                let (xs, ys) = (x.shape(), y.shape());
                if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                    return Err(Error::shape("matmul", format!("cannot multiply {xs:?} by {ys:?}")));
                }
                let (m, k, n) = (xs[0], xs[1], ys[1]);
                Tensor::new(vec![m, n], kernels::matmul(x.data(), y.data(), m, k, n))
            },
            Op::MatMul,
        )
    }

    /// Cross-correlation of a `[C_in×H×W]` input with `[C_out×C_in×k×k]`
    /// kernels under zero padding.
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (i, j) = (self.check(input)?, self.check(kernel)?);
        let (value, geom, rg) = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[i].value, &nodes[j].value);
            let geom = conv_geom(x.shape(), w.shape(), stride, pad)?;
            let out = kernels::conv2d_forward(x.data(), w.data(), &geom);
            (
                Tensor::new(vec![geom.cout, geom.oh, geom.ow], out)?,
                geom,
                nodes[i].requires_grad || nodes[j].requires_grad,
            )
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input: i,
                kernel: j,
                geom,
            },
            rg,
        ))
    }

    /// Adds `b[c]` to every element of channel `c` of a `[C×H×W]` tensor.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        self.binary(
            x,
            b,
            |x, b| {
                let (c, plane) = channel_layout("add_channel_bias", x.shape(), b.shape())?;
                let mut out = x.data().to_vec();
                for ch in 0..c {
                    let bias = b.data()[ch];
                    out[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += bias);
                }
                Tensor::new(x.shape().to_vec(), out)
            },
            Op::ChannelBias,
        )
    }

    /// Multiplies channel `c` of a `[C×H×W]` tensor by `s[c]`.
    pub fn channel_scale(&self, x: Var, s: Var) -> Result<Var> {
        self.binary(
            x,
            s,
            |x, s| {
                let (c, plane) = channel_layout("channel_scale", x.shape(), s.shape())?;
                let mut out = x.data().to_vec();
                for ch in 0..c {
                    let f = s.data()[ch];
                    out[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v *= f);
                }
                Tensor::new(x.shape().to_vec(), out)
            },
            Op::ChannelScale,
        )
    }

    /// Adds `b[n]` to every row of a `[B×N]` matrix.
    pub fn add_row_bias(&self, x: Var, b: Var) -> Result<Var> {
        self.binary(
            x,
            b,
            |x, b| {
                let xs = x.shape();
                if xs.len() != 2 || b.shape() != [xs[1]] {
                    return Err(Error::shape(
                        "add_row_bias",
                        format!("bias {:?} does not match rows of {xs:?}", b.shape()),
                    ));
                }
                let mut out = x.data().to_vec();
                for row in out.chunks_exact_mut(xs[1]) {
                    row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
                }
                Tensor::new(xs.to_vec(), out)
            },
            Op::RowBias,
        )
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()),
            Op::Relu,
        )
    }

    /// Averages disjoint 2×2 blocks over the two trailing dimensions.
    pub fn avgpool2(&self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |x| {
                let (planes, h, w) = spatial_split("avgpool2", x.shape())?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("avgpool2", format!("spatial dims {h}×{w} must be even")));
                }
                let (oh, ow) = (h / 2, w / 2);
                let d = x.data();
                let mut out = vec![0.0; planes * oh * ow];
                for p in 0..planes {
                    let src = &d[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let s = src[2 * y * w + 2 * xx]
                                + src[2 * y * w + 2 * xx + 1]
                                + src[(2 * y + 1) * w + 2 * xx]
                                + src[(2 * y + 1) * w + 2 * xx + 1];
                            out[p * oh * ow + y * ow + xx] = 0.25 * s;
                        }
                    }
                }
                let mut shape = x.shape().to_vec();
                let n = shape.len();
                shape[n - 2] = oh;
                shape[n - 1] = ow;
                Tensor::new(shape, out)
            },
            Op::AvgPool2,
        )
    }

    /// Averages each trailing `H×W` plane to a single value.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |x| {
                let (planes, h, w) = spatial_split("global_avg_pool", x.shape())?;
                let n = (h * w) as f64;
                let out = x.data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
                let shape = x.shape()[..x.shape().len() - 2].to_vec();
                debug_assert_eq!(shape.iter().product::<usize>(), planes);
                Tensor::new(shape, out)
            },
            Op::GlobalAvgPool,
        )
    }

    /// `min(max(x, 0), 1)`; gradient passes only where `0 < x < 1`.
    pub fn clip01(&self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()),
            Op::Clip01,
        )
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect()),
            Op::Exp,
        )
    }

    /// Arc-cosine with the argument clamped to `[-1, 1]`. The gradient is zero
    /// where the clamp is active.
    pub fn acos(&self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.clamp(-1.0, 1.0).acos()).collect()),
            Op::Acos,
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.unary(x, |x| x.reshaped(shape), Op::Reshape)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary(x, |x| Ok(Tensor::scalar(x.data().iter().sum())), Op::Sum)
    }

    /// `⟨a,b⟩ / (‖a‖‖b‖)` for two equally shaped tensors, as a scalar.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |a, b| {
                if a.shape() != b.shape() {
                    return Err(Error::shape(
                        "cosine_similarity",
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let (na, nb) = (norm(a.data()), norm(b.data()));
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::invalid("cosine similarity of a zero vector"));
                }
                Ok(Tensor::scalar(kernels::dot(a.data(), b.data()) / (na * nb)))
            },
            Op::CosineSimilarity,
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]` for `[B×K]` logits.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let (value, probs, rg) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[i].value;
            let xs = x.shape();
            if xs.len() != 2 || xs[0] != labels.len() {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("logits {xs:?} do not match {} labels", labels.len()),
                ));
            }
            let k = xs[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
            }
            let (probs, loss) = softmax_rows(x.data(), k, labels);
            (Tensor::scalar(loss), probs, nodes[i].requires_grad)
        };
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: i,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            backprop(&nodes, &node.op, &node.value, g, &mut grads);
        }

        let out = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }
}

fn norm(x: &[f64]) -> f64 {
    kernels::dot(x, x).sqrt()
}

fn softmax_rows(logits: &[f64], k: usize, labels: &[usize]) -> (Vec<f64>, f64) {
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (b, (row, out)) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
        total += z.ln() + m - row[labels[b]];
    }
    (probs, total / labels.len() as f64)
}

fn channel_layout(op: &'static str, x: &[usize], per_channel: &[usize]) -> Result<(usize, usize)> {
    if x.len() != 3 || per_channel != [x[0]] {
        return Err(Error::shape(
            op,
            format!("per-channel tensor {per_channel:?} does not match [C×H×W] {x:?}"),
        ));
    }
    Ok((x[0], x[1] * x[2]))
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 3 || w.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected [C×H×W] input and [O×C×k×k] kernel, got {x:?} and {w:?}"),
        ));
    }
    let (cin, h, wd) = (x[0], x[1], x[2]);
    let (cout, kc, k, k2) = (w[0], w[1], w[2], w[3]);
    if kc != cin {
        return Err(Error::shape("conv2d", format!("kernel expects {kc} channels, input has {cin}")));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square with odd size, got {k}×{k2}")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    if ph < k || pw < k || (ph - k) % stride != 0 || (pw - k) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("output size for {h}×{wd}, k={k}, stride={stride}, pad={pad} is not integral"),
        ));
    }
    Ok(ConvGeom {
        cin,
        h,
        w: wd,
        cout,
        k,
        stride,
        pad,
        oh: (ph - k) / stride + 1,
        ow: (pw - k) / stride + 1,
    })
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(a) {
                accumulate(nodes, grads, a, unbroadcast(g.clone(), val(a)));
            }
            accumulate(nodes, grads, b, unbroadcast(g, val(b)));
        }
        Op::Sub(a, b) => {
            if rg(a) {
                accumulate(nodes, grads, a, unbroadcast(g.clone(), val(a)));
            }
            accumulate(nodes, grads, b, unbroadcast(g.iter().map(|v| -v).collect(), val(b)));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            if rg(a) {
                let ga = broadcast_mul_grad(&g, vb);
                accumulate(nodes, grads, a, unbroadcast(ga, va));
            }
            if rg(b) {
                let gb = broadcast_mul_grad(&g, va);
                accumulate(nodes, grads, b, unbroadcast(gb, vb));
            }
        }
        Op::ScalarMul(a, s) => accumulate(nodes, grads, a, g.iter().map(|v| v * s).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, a, g),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if rg(a) {
                accumulate(nodes, grads, a, kernels::matmul_a_bt(&g, vb.data(), m, n, k));
            }
            if rg(b) {
                accumulate(nodes, grads, b, kernels::matmul_at_b(va.data(), &g, m, k, n));
            }
        }
        Op::Conv2d { input, kernel, geom } => {
            let (di, dk) = kernels::conv2d_backward(
                val(input).data(),
                val(kernel).data(),
                &g,
                &geom,
                rg(input),
                rg(kernel),
            );
            if let Some(di) = di {
                accumulate(nodes, grads, input, di);
            }
            if let Some(dk) = dk {
                accumulate(nodes, grads, kernel, dk);
            }
        }
        Op::ChannelBias(x, b) => {
            let c = val(b).len();
            if rg(b) {
                let plane = g.len() / c;
                let gb = g.chunks_exact(plane).map(|p| p.iter().sum()).collect();
                accumulate(nodes, grads, b, gb);
            }
            accumulate(nodes, grads, x, g);
        }
        Op::RowBias(x, b) => {
            if rg(b) {
                let n = val(b).len();
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                accumulate(nodes, grads, b, gb);
            }
            accumulate(nodes, grads, x, g);
        }
        Op::ChannelScale(x, s) => {
            let (vx, vs) = (val(x), val(s));
            let plane = vx.len() / vs.len();
            if rg(s) {
                let gs = g
                    .chunks_exact(plane)
                    .zip(vx.data().chunks_exact(plane))
                    .map(|(gp, xp)| kernels::dot(gp, xp))
                    .collect();
                accumulate(nodes, grads, s, gs);
            }
            if rg(x) {
                let mut gx = g;
                for (gp, &f) in gx.chunks_exact_mut(plane).zip(vs.data()) {
                    gp.iter_mut().for_each(|v| *v *= f);
                }
                accumulate(nodes, grads, x, gx);
            }
        }
        Op::Relu(x) => {
            let gx = g
                .iter()
                .zip(val(x).data())
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        Op::AvgPool2(x) => {
            let vx = val(x);
            let n = vx.shape().len();
            let (h, w) = (vx.shape()[n - 2], vx.shape()[n - 1]);
            let (oh, ow) = (h / 2, w / 2);
            let mut gx = vec![0.0; vx.len()];
            for (p, gp) in g.chunks_exact(oh * ow).enumerate() {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = 0.25 * gp[y * ow + xx];
                        dst[2 * y * w + 2 * xx] = v;
                        dst[2 * y * w + 2 * xx + 1] = v;
                        dst[(2 * y + 1) * w + 2 * xx] = v;
                        dst[(2 * y + 1) * w + 2 * xx + 1] = v;
                    }
                }
            }
            accumulate(nodes, grads, x, gx);
        }
        Op::GlobalAvgPool(x) => {
            let vx = val(x);
            let plane = vx.len() / g.len();
            let inv = 1.0 / plane as f64;
            let mut gx = Vec::with_capacity(vx.len());
            for gv in &g {
                gx.extend(std::iter::repeat(gv * inv).take(plane));
            }
            accumulate(nodes, grads, x, gx);
        }
        Op::Clip01(x) => {
            let gx = g
                .iter()
                .zip(val(x).data())
                .map(|(gv, &xv)| if xv > 0.0 && xv < 1.0 { *gv } else { 0.0 })
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        Op::Exp(x) => {
            let gx = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
            accumulate(nodes, grads, x, gx);
        }
        Op::Acos(x) => {
            let gx = g
                .iter()
                .zip(val(x).data())
                .map(|(gv, &xv)| {
                    if xv > -1.0 && xv < 1.0 {
                        -gv / (1.0 - xv * xv).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        Op::Sum(x) => {
            let n = val(x).len();
            accumulate(nodes, grads, x, vec![g[0]; n]);
        }
        Op::CosineSimilarity(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            let (na, nb) = (norm(va), norm(vb));
            let c = out.data()[0];
            let gs = g[0];
            let grad_for = |this: &[f64], other: &[f64], n_this: f64| -> Vec<f64> {
                this.iter()
                    .zip(other)
                    .map(|(t, o)| gs * (o / (na * nb) - c * t / (n_this * n_this)))
                    .collect()
            };
            if rg(a) {
                accumulate(nodes, grads, a, grad_for(va, vb, na));
            }
            if rg(b) {
                accumulate(nodes, grads, b, grad_for(vb, va, nb));
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            ref labels,
            ref probs,
        } => {
            let k = val(logits).shape()[1];
            let scale = g[0] / labels.len() as f64;
            let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (b, &l) in labels.iter().enumerate() {
                gl[b * k + l] -= scale;
            }
            accumulate(nodes, grads, logits, gl);
        }
    }
}

/// Gradient of an elementwise product with respect to one operand, before
/// reduction to that operand's shape.
fn broadcast_mul_grad(g: &[f64], other: &Tensor) -> Vec<f64> {
    if other.len() == g.len() {
        g.iter().zip(other.data()).map(|(a, b)| a * b).collect()
    } else {
        let s = other.data()[0];
        g.iter().map(|v| v * s).collect()
    }
}
