//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, which is a topological order by construction. [`Var::backward`]
//! walks the records in reverse exactly once and accumulates gradients into
//! the leaves. Tapes are cheap; build a fresh one for every forward pass.
//!
//! Every forward op checks its result for NaN/Inf and reports it as an
//! error instead of letting it propagate. `log` of a non-positive value and
//! division by zero are rejected up front.
//!
//! Broadcasting is deliberately narrow: the right operand of a binary op
//! may be a scalar, a per-channel vector `[C]` (axis 1 of the left operand)
//! or a per-item vector `[N]` (axis 0).

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// right operand indexed by axis 1: `(i / plane) % channels`
    Channel { channels: usize, plane: usize },
    /// right operand indexed by axis 0: `i / item`
    Item { item: usize },
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Bcast::Same);
        }
        let b_len: usize = b.iter().product();
        if b_len == 1 {
            return Ok(Bcast::Scalar);
        }
        if b.len() == 1 && a.len() >= 2 && a[1] == b[0] {
            return Ok(Bcast::Channel {
                channels: b[0],
                plane: a[2..].iter().product(),
            });
        }
        if b.len() == 1 && !a.is_empty() && a[0] == b[0] {
            return Ok(Bcast::Item {
                item: a[1..].iter().product(),
            });
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Channel { channels, plane } => (i / plane) % channels,
            Bcast::Item { item } => i / item,
        }
    }

    /// Sums a full-shape gradient down to the right operand's shape.
    fn reduce<T: Scalar>(self, full: &[T], b_shape: &[usize]) -> Tensor<T> {
        if self == Bcast::Same {
            return Tensor::new(b_shape, full.to_vec()).expect("same shape");
        }
        let mut out = Tensor::zeros(b_shape);
        let d = out.data_mut();
        for (i, &g) in full.iter().enumerate() {
            d[self.index(i)] += g;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind<T> {
    Neg,
    Exp,
    Log,
    Sigmoid,
    LogSigmoid,
    Abs,
    Square,
    LeakyRelu(T),
    Clamp(T, T),
    AddScalar(T),
    MulScalar(T),
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    Unary {
        kind: UnaryKind<T>,
        a: usize,
    },
    Reduce {
        a: usize,
        /// output flat index for every input flat index
        map: Rc<[usize]>,
        mean_divisor: Option<T>,
    },
    Conv {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        spec: ConvSpec,
    },
    Gather {
        a: usize,
        index: Rc<[usize]>,
    },
    Concat {
        parts: Vec<usize>,
        channels: Vec<usize>,
    },
    AvgPool {
        a: usize,
        k: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<T> {
    tape: Tape<T>,
    id: usize,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                leaf_grads: Vec::new(),
            })),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param,
        });
        inner.leaf_grads.push(None);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor<T>) -> Var<T> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push(value, Op::Leaf, false, None)
    }

    /// Leaf bound to a stored parameter; differentiable iff the block is trainable.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf, p.trainable, Some(id))
    }

    /// Parameter value recorded as a constant (frozen network).
    pub fn frozen(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        self.constant(store.value(id).clone())
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: &Var<T>) -> Option<Tensor<T>> {
        self.inner.borrow().leaf_grads[v.id].clone()
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().leaf_grads.iter_mut() {
            *g = None;
        }
    }

    /// Gradients of every parameter leaf, in recording order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .zip(&inner.leaf_grads)
            .filter_map(|(n, g)| Some((n.param?, g.clone()?)))
            .collect()
    }

    /// Adds the parameter gradients of this tape into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, &g)?;
        }
        Ok(())
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn same_tape(&self, other: &Tape<T>) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.inner) {
            Ok(())
        } else {
            Err(Error::shape("tape", "operands recorded on different tapes"))
        }
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let shape = inner.nodes[loss].value.shape().to_vec();
        if inner.nodes[loss].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Tensor::ones(&shape));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = node_backward(&inner.nodes, node, &g)?;
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (parent, pg) in contributions {
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(inner.nodes[id].op, Op::Leaf) || !inner.nodes[id].requires_grad {
                continue;
            }
            match &mut inner.leaf_grads[id] {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn unary_grad<T: Scalar>(kind: UnaryKind<T>, x: T, y: T) -> T {
    match kind {
        UnaryKind::Neg => -T::one(),
        UnaryKind::Exp => y,
        UnaryKind::Log => T::one() / x,
        UnaryKind::Sigmoid => y * (T::one() - y),
        // d/dx log σ(x) = 1 − σ(x) = σ(−x)
        UnaryKind::LogSigmoid => sigmoid(-x),
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Square => T::of(2.0) * x,
        UnaryKind::LeakyRelu(slope) => {
            if x > T::zero() {
                T::one()
            } else {
                slope
            }
        }
        UnaryKind::Clamp(lo, hi) => {
            if x < lo || x > hi {
                T::zero()
            } else {
                T::one()
            }
        }
        UnaryKind::AddScalar(_) => T::one(),
        UnaryKind::MulScalar(c) => c,
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    // log σ(x) = −softplus(−x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn unary_forward<T: Scalar>(kind: UnaryKind<T>, x: T) -> T {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::LogSigmoid => log_sigmoid(x),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::LeakyRelu(slope) => {
            if x > T::zero() {
                x
            } else {
                slope * x
            }
        }
        UnaryKind::Clamp(lo, hi) => x.max(lo).min(hi),
        UnaryKind::AddScalar(c) => x + c,
        UnaryKind::MulScalar(c) => x * c,
    }
}

/// Gradient contributions of `node` to its parents, given its output gradient.
fn node_backward<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let wants = |id: usize| nodes[id].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, bcast } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            if wants(*a) {
                let ga: Vec<T> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                    BinaryKind::Mul => gd
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * bd[bcast.index(i)])
                        .collect(),
                    BinaryKind::Div => gd
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi / bd[bcast.index(i)])
                        .collect(),
                };
                out.push((*a, Tensor::new(av.shape(), ga)?));
            }
            if wants(*b) {
                let full: Vec<T> = match kind {
                    BinaryKind::Add => gd.to_vec(),
                    BinaryKind::Sub => gd.iter().map(|&gi| -gi).collect(),
                    BinaryKind::Mul => gd.iter().zip(ad).map(|(&gi, &ai)| gi * ai).collect(),
                    BinaryKind::Div => gd
                        .iter()
                        .zip(ad)
                        .enumerate()
                        .map(|(i, (&gi, &ai))| {
                            let bi = bd[bcast.index(i)];
                            -gi * ai / (bi * bi)
                        })
                        .collect(),
                };
                out.push((*b, bcast.reduce(&full, bv.shape())));
            }
        }
        Op::Unary { kind, a } => {
            if wants(*a) {
                let xv = &nodes[*a].value;
                let yv = &node.value;
                let ga: Vec<T> = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&gi, (&x, &y))| gi * unary_grad(*kind, x, y))
                    .collect();
                out.push((*a, Tensor::new(xv.shape(), ga)?));
            }
        }
        Op::Reduce {
            a,
            map,
            mean_divisor,
        } => {
            if wants(*a) {
                let gd = g.data();
                let scale = mean_divisor.map_or(T::one(), |d| T::one() / d);
                let ga: Vec<T> = map.iter().map(|&j| gd[j] * scale).collect();
                out.push((*a, Tensor::new(nodes[*a].value.shape(), ga)?));
            }
        }
        Op::Conv {
            input,
            kernel,
            bias,
            spec,
        } => {
            let want = (
                wants(*input),
                wants(*kernel),
                bias.is_some_and(|b| wants(b)),
            );
            let grads = conv::conv2d_backward(&nodes[*input].value, &nodes[*kernel].value, g, *spec, want)?;
            if let Some(gi) = grads.input {
                out.push((*input, gi));
            }
            if let Some(gk) = grads.kernel {
                out.push((*kernel, gk));
            }
            if let (Some(b), Some(gb)) = (bias, grads.bias) {
                out.push((*b, gb));
            }
        }
        Op::Gather { a, index } => {
            if wants(*a) {
                let mut ga = Tensor::zeros(nodes[*a].value.shape());
                let d = ga.data_mut();
                for (&src, &gi) in index.iter().zip(g.data()) {
                    d[src] += gi;
                }
                out.push((*a, ga));
            }
        }
        Op::Concat { parts, channels } => {
            let mut start = 0;
            for (&p, &c) in parts.iter().zip(channels) {
                if wants(p) {
                    out.push((p, g.narrow_channels(start, c)?));
                }
                start += c;
            }
        }
        Op::AvgPool { a, k } => {
            if wants(*a) {
                let shape = nodes[*a].value.shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::of((k * k) as f64);
                let gd = g.data();
                let ga = Tensor::from_fn(shape, |i| {
                    let x = i % w;
                    let y = (i / w) % h;
                    let nc = i / (h * w);
                    gd[(nc * oh + y / k) * ow + x / k] * inv
                });
                let _ = (n, c);
                out.push((*a, ga));
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Gradient accumulated into this leaf by previous backward passes.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(self)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    /// Back-propagates from this scalar; leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    /// Re-records this value as a constant (stops gradient flow).
    pub fn detach(&self) -> Var<T> {
        self.tape.constant((*self.value()).clone())
    }

    fn record(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<T>> {
        check_finite(op_name, &value)?;
        let requires = parents.iter().any(|&p| self.tape.requires(p));
        Ok(self.tape.push(value, op, requires, None))
    }

    fn binary(&self, other: &Var<T>, kind: BinaryKind, name: &'static str) -> Result<Var<T>> {
        self.tape.same_tape(&other.tape)?;
        let a = self.value();
        let b = other.value();
        let bcast = Bcast::resolve(name, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        if kind == BinaryKind::Div && bd.iter().any(|&v| v == T::zero()) {
            return Err(Error::domain("div", "division by zero"));
        }
        let data: Vec<T> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bcast.index(i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(a.shape(), data)?;
        self.record(
            name,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                bcast,
            },
            &[self.id, other.id],
        )
    }

    fn unary(&self, kind: UnaryKind<T>, name: &'static str) -> Result<Var<T>> {
        let a = self.value();
        if kind == UnaryKind::Log {
            if let Some(bad) = a.data().iter().find(|&&v| v <= T::zero()) {
                return Err(Error::domain("log", format!("log of non-positive value {bad}")));
            }
        }
        let value = a.map(|x| unary_forward(kind, x));
        self.record(name, value, Op::Unary { kind, a: self.id }, &[self.id])
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Neg, "neg")
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Exp, "exp")
    }

    pub fn log(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Log, "log")
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Sigmoid, "sigmoid")
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::LogSigmoid, "log_sigmoid")
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Abs, "abs")
    }

    pub fn square(&self) -> Result<Var<T>> {
        self.unary(UnaryKind::Square, "square")
    }

    pub fn leaky_relu(&self, slope: T) -> Result<Var<T>> {
        self.unary(UnaryKind::LeakyRelu(slope), "leaky_relu")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Var<T>> {
        self.unary(UnaryKind::Clamp(lo, hi), "clamp")
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<T>> {
        self.unary(UnaryKind::AddScalar(c), "add_scalar")
    }

    pub fn mul_scalar(&self, c: T) -> Result<Var<T>> {
        self.unary(UnaryKind::MulScalar(c), "mul_scalar")
    }

    fn reduce_impl(&self, axes: &[usize], mean: bool) -> Result<Var<T>> {
        let a = self.value();
        let shape = a.shape();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::shape(
                "reduce",
                format!("axis {bad} out of range for shape {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        // strides of the kept axes inside the output
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for i in (0..shape.len()).rev() {
            if !axes.contains(&i) {
                out_strides[i] = stride;
                stride *= shape[i];
            }
        }
        let mut map = Vec::with_capacity(a.len());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..a.len() {
            map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out = Tensor::zeros(&out_shape);
        {
            let d = out.data_mut();
            for (&j, &x) in map.iter().zip(a.data()) {
                d[j] += x;
            }
        }
        let divisor = if mean {
            let count: usize = axes.iter().map(|&ax| shape[ax]).product();
            let div = T::of(count as f64);
            out = out.map(|x| x / div);
            Some(div)
        } else {
            None
        };
        self.record(
            if mean { "mean" } else { "sum" },
            out,
            Op::Reduce {
                a: self.id,
                map: map.into(),
                mean_divisor: divisor,
            },
            &[self.id],
        )
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        self.reduce_impl(axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        self.reduce_impl(axes, true)
    }

    pub fn sum(&self) -> Result<Var<T>> {
        let rank = self.shape().len();
        self.reduce_impl(&(0..rank).collect::<Vec<_>>(), false)
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let rank = self.shape().len();
        self.reduce_impl(&(0..rank).collect::<Vec<_>>(), true)
    }

    /// Sum over every axis except the leading batch axis: `[N, ...] → [N]`.
    pub fn sum_per_item(&self) -> Result<Var<T>> {
        let rank = self.shape().len();
        self.reduce_impl(&(1..rank).collect::<Vec<_>>(), false)
    }

    /// Cross-correlation with kernel `(out, in, kh, kw)` and optional bias `[out]`.
    pub fn conv2d(&self, kernel: &Var<T>, bias: Option<&Var<T>>, spec: ConvSpec) -> Result<Var<T>> {
        self.tape.same_tape(&kernel.tape)?;
        if let Some(b) = bias {
            self.tape.same_tape(&b.tape)?;
        }
        let bias_val = bias.map(|b| b.value());
        let value = conv::conv2d_forward(&self.value(), &kernel.value(), bias_val.as_deref(), spec)?;
        let mut parents = vec![self.id, kernel.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        self.record(
            "conv2d",
            value,
            Op::Conv {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                spec,
            },
            &parents,
        )
    }

    /// `out[i] = self[index[i]]` reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<T>> {
        let a = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= a.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", a.len())));
        }
        let data = index.iter().map(|&i| a.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.record("gather", value, Op::Gather { a: self.id, index }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let len: usize = shape.iter().product();
        let index: Rc<[usize]> = (0..len).collect::<Vec<_>>().into();
        self.gather(index, shape)
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape();
        let (n, c, h, w) = dims4("narrow_channels", &shape)?;
        if start + len > c {
            return Err(Error::shape(
                "narrow_channels",
                format!("range {start}..{} exceeds {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut index = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            index.extend(base..base + len * plane);
        }
        self.gather(index.into(), &[n, len, h, w])
    }

    /// Channel-axis concatenation of NCHW vars recorded on the same tape.
    pub fn concat_channels(parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        for p in parts {
            first.tape.same_tape(&p.tape)?;
        }
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat_channels(&refs)?;
        let channels = values.iter().map(|v| v.shape()[1]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.record(
            "concat_channels",
            value,
            Op::Concat {
                parts: ids.clone(),
                channels,
            },
            &ids,
        )
    }

    /// `k×k` average pooling with stride `k`; extents must be divisible by `k`.
    pub fn avg_pool(&self, k: usize) -> Result<Var<T>> {
        let shape = self.shape();
        let (n, c, h, w) = dims4("avg_pool", &shape)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("{h}x{w} not divisible by window {k}"),
            ));
        }
        let a = self.value();
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::of((k * k) as f64);
        let ad = a.data();
        let value = Tensor::from_fn(&[n, c, oh, ow], |i| {
            let x = i % ow;
            let y = (i / ow) % oh;
            let nc = i / (oh * ow);
            let mut acc = T::zero();
            for dy in 0..k {
                for dx in 0..k {
                    acc += ad[(nc * h + y * k + dy) * w + x * k + dx];
                }
            }
            acc * inv
        });
        self.record("avg_pool", value, Op::AvgPool { a: self.id, k }, &[self.id])
    }

    /// Global spatial mean: `[N, C, H, W] → [N, C, 1, 1]`.
    pub fn mean_spatial(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let (n, c, _, _) = dims4("mean_spatial", &shape)?;
        self.mean_axes(&[2, 3])?.reshape(&[n, c, 1, 1])
    }
}

pub(crate) fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected NCHW, got {shape:?}"))),
    }
}
