use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{axis_split, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    BroadcastTo(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    Concat(Vec<usize>, usize),
    IndexSelect(usize, Vec<usize>),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Sigmoid(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Node ids are assigned in execution order, so every node's inputs precede
/// it and the reverse sweep in [`Tape::backward`] is a valid topological order.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = parents.iter().any(|&p| self.requires(p));
        Ok(self.push(value, op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let seed_value = &nodes[loss.id].value;
        if seed_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(seed_value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (parent, pg) in local_grads(&nodes, id, &g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if g.is_some() && !matches!(nodes[id].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn local_grads<T: Element>(nodes: &[Node<T>], id: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let node = &nodes[id];
    let val = |i: usize| nodes[i].value.as_ref();
    let wants = |i: usize| nodes[i].requires_grad;
    let like = |shape: &[usize], data: Vec<T>| Tensor::from_parts(shape.to_vec(), data);
    let zip = |a: &[T], b: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let gd = g.data();
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            vec![
                (*a, like(va.shape(), zip(gd, vb.data(), &|g, y| g * y))),
                (*b, like(vb.shape(), zip(gd, va.data(), &|g, x| g * x))),
            ]
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let da = zip(gd, vb.data(), &|g, y| g / y);
            let db: Vec<T> = gd
                .iter()
                .zip(va.data())
                .zip(vb.data())
                .map(|((&g, &x), &y)| -g * x / (y * y))
                .collect();
            vec![(*a, like(va.shape(), da)), (*b, like(vb.shape(), db))]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let mut out = Vec::new();
            if wants(*a) {
                let mut da = vec![T::zero(); m * k];
                gemm_nt(gd, vb.data(), &mut da, m, n, k);
                out.push((*a, like(va.shape(), da)));
            }
            if wants(*b) {
                let mut db = vec![T::zero(); k * n];
                gemm_tn(va.data(), gd, &mut db, k, m, n);
                out.push((*b, like(vb.shape(), db)));
            }
            out
        }
        Op::BatchMatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
            let mut out = Vec::new();
            if wants(*a) {
                let mut da = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    gemm_nt(
                        &gd[i * m * n..(i + 1) * m * n],
                        &vb.data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                out.push((*a, like(va.shape(), da)));
            }
            if wants(*b) {
                let mut db = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    gemm_tn(
                        &va.data()[i * m * k..(i + 1) * m * k],
                        &gd[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                out.push((*b, like(vb.shape(), db)));
            }
            out
        }
        Op::Reshape(a) => vec![(*a, like(val(*a).shape(), gd.to_vec()))],
        Op::Permute(a, axes) => {
            let inv = kernels::inverse_axes(axes);
            vec![(*a, like(val(*a).shape(), kernels::permute(gd, g.shape(), &inv)))]
        }
        Op::BroadcastTo(a) => {
            let in_shape = val(*a).shape();
            vec![(*a, like(in_shape, kernels::unbroadcast(gd, in_shape, g.shape())))]
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let in_shape = val(*a).shape();
            let (outer, len, inner) = axis_split(in_shape, *axis);
            let factor = match node.op {
                Op::MeanAxis(..) => T::one() / T::from_usize(len).unwrap(),
                _ => T::one(),
            };
            let mut d = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        d[o * len * inner + j * inner + i] = gd[o * inner + i] * factor;
                    }
                }
            }
            vec![(*a, like(in_shape, d))]
        }
        Op::SumAll(a) => {
            let in_shape = val(*a).shape();
            vec![(*a, Tensor::full(in_shape, gd[0]))]
        }
        Op::Concat(parts, axis) => {
            let mut out = Vec::with_capacity(parts.len());
            let (outer, _, inner) = axis_split(g.shape(), *axis);
            let total = g.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let ps = val(p).shape();
                let len = ps[*axis];
                if wants(p) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    out.push((p, like(ps, d)));
                }
                offset += len;
            }
            out
        }
        Op::IndexSelect(a, indices) => {
            let in_shape = val(*a).shape();
            let row: usize = in_shape[1..].iter().product();
            let mut d = vec![T::zero(); val(*a).numel()];
            for (r, &src) in indices.iter().enumerate() {
                for c in 0..row {
                    d[src * row + c] = d[src * row + c] + gd[r * row + c];
                }
            }
            vec![(*a, like(in_shape, d))]
        }
        Op::Softmax(a, axis) => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(g.shape(), *axis);
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut s = T::zero();
                    for j in 0..len {
                        s = s + gd[at(j)] * y[at(j)];
                    }
                    for j in 0..len {
                        d[at(j)] = y[at(j)] * (gd[at(j)] - s);
                    }
                }
            }
            vec![(*a, like(g.shape(), d))]
        }
        Op::LogSoftmax(a, axis) => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(g.shape(), *axis);
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut s = T::zero();
                    for j in 0..len {
                        s = s + gd[at(j)];
                    }
                    for j in 0..len {
                        d[at(j)] = gd[at(j)] - y[at(j)].exp() * s;
                    }
                }
            }
            vec![(*a, like(g.shape(), d))]
        }
        Op::Exp(a) => vec![(*a, like(g.shape(), zip(gd, node.value.data(), &|g, y| g * y)))],
        Op::Log(a) => vec![(*a, like(g.shape(), zip(gd, val(*a).data(), &|g, x| g / x)))],
        Op::Sqrt(a) => {
            let two = T::one() + T::one();
            vec![(*a, like(g.shape(), zip(gd, node.value.data(), &|g, y| g / (two * y))))]
        }
        Op::Relu(a) => vec![(
            *a,
            like(
                g.shape(),
                zip(gd, val(*a).data(), &|g, x| if x > T::zero() { g } else { T::zero() }),
            ),
        )],
        Op::Sigmoid(a) => vec![(
            *a,
            like(
                g.shape(),
                zip(gd, node.value.data(), &|g, y| g * y * (T::one() - y)),
            ),
        )],
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands recorded on different tapes".into()))
        }
    }

    fn elementwise(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(
                name,
                format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.tape.record(name, out, op, &[self.id, other.id])
    }

    fn unary(&self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let out = self.value().map(f);
        self.tape.record(name, out, op, &[self.id])
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        self.unary("scale", |x| x * s, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Result<Var<'t, T>> {
        self.unary("add_scalar", |x| x + s, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        self.unary("exp", |x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Result<Var<'t, T>> {
        self.unary("log", |x| x.ln(), Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Result<Var<'t, T>> {
        self.unary("sqrt", |x| x.sqrt(), Op::Sqrt(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary("relu", |x| x.max(T::zero()), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        gemm_nn(a.data(), b.data(), &mut c, m, k, n);
        self.tape.record(
            "matmul",
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// `[B×m×k] · [B×k×n]`
    pub fn bmm(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(Error::dim(
                "bmm",
                format!("cannot batch-multiply {:?} by {:?}", a.shape(), b.shape()),
            ));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut c = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.tape.record(
            "bmm",
            Tensor::from_parts(vec![bs, m, n], c),
            Op::BatchMatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())
            .map_err(|_| Error::dim("reshape", format!("cannot view {:?} as {shape:?}", v.shape())))?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if axes.len() != v.rank() || axes.iter().any(|&a| a >= v.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(
                "permute",
                format!("{axes:?} is not a permutation for shape {:?}", v.shape()),
            ));
        }
        let data = kernels::permute(v.data(), v.shape(), axes);
        let out = Tensor::from_parts(kernels::permuted_shape(v.shape(), axes), data);
        self.tape.record("permute", out, Op::Permute(self.id, axes.to_vec()), &[self.id])
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Var<'t, T>> {
        self.permute(&[1, 0])
    }

    /// Repeats extent-1 axes to reach `shape`. Ranks must match.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.rank() != shape.len()
            || v.shape().iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::dim(
                "broadcast_to",
                format!("cannot broadcast {:?} to {shape:?}", v.shape()),
            ));
        }
        let data = kernels::broadcast(v.data(), v.shape(), shape);
        self.tape.record(
            "broadcast_to",
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo(self.id),
            &[self.id],
        )
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let v = self.value();
        check_axis(name, v.shape(), axis)?;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let x = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0f64;
                for j in 0..len {
                    s += x[o * len * inner + j * inner + i].as_f64();
                }
                if mean {
                    s /= len as f64;
                }
                out.push(T::from_f64_lossy(s));
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        self.tape.record(name, Tensor::from_parts(shape, out), op, &[self.id])
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    /// Sum of every element as a scalar.
    pub fn sum(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        let s: f64 = v.data().iter().map(|x| x.as_f64()).sum();
        self.tape.record(
            "sum",
            Tensor::scalar(T::from_f64_lossy(s)),
            Op::SumAll(self.id),
            &[self.id],
        )
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.sum()?.scale(T::one() / T::from_usize(n).unwrap())
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let tape = first.tape;
        let values: Vec<_> = parts
            .iter()
            .map(|p| first.same_tape(p).map(|_| p.value()))
            .collect::<Result<_>>()?;
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim(
                    "concat",
                    format!("shapes {base:?} and {s:?} disagree off axis {axis}"),
                ));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat(ids.clone(), axis),
            &ids,
        )
    }

    /// Gathers rows (slices along axis 0) in the order given by `indices`.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.rank() == 0 || indices.is_empty() {
            return Err(Error::dim("index_select", "needs rank ≥ 1 and at least one index"));
        }
        let rows = v.shape()[0];
        let row: usize = v.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= rows {
                return Err(Error::dim("index_select", format!("row {i} out of {rows}")));
            }
            data.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        self.tape.record(
            "index_select",
            Tensor::from_parts(shape, data),
            Op::IndexSelect(self.id, indices.to_vec()),
            &[self.id],
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        check_axis("softmax", v.shape(), axis)?;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let y = kernels::softmax(v.data(), outer, len, inner);
        self.tape.record(
            "softmax",
            Tensor::from_parts(v.shape().to_vec(), y),
            Op::Softmax(self.id, axis),
            &[self.id],
        )
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        check_axis("log_softmax", v.shape(), axis)?;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let y = kernels::log_softmax(v.data(), outer, len, inner);
        self.tape.record(
            "log_softmax",
            Tensor::from_parts(v.shape().to_vec(), y),
            Op::LogSoftmax(self.id, axis),
            &[self.id],
        )
    }

    /// Euclidean norm along the last axis.
    pub fn l2_norm(&self) -> Result<Var<'t, T>> {
        let last = self.value().rank().checked_sub(1).ok_or_else(|| Error::dim("l2_norm", "scalar input"))?;
        self.mul(self)?.sum_axis(last)?.sqrt()
    }

    /// Squared Euclidean distance along the last axis.
    pub fn sq_l2_distance(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let diff = self.sub(other)?;
        let last = diff.value().rank().checked_sub(1).ok_or_else(|| Error::dim("sq_l2_distance", "scalar input"))?;
        diff.mul(&diff)?.sum_axis(last)
    }

    /// Cosine similarity along the last axis. Zero-norm rows are an error.
    pub fn cosine_similarity(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let dot = self.mul(other)?;
        let last = dot.value().rank().checked_sub(1).ok_or_else(|| Error::dim("cosine_similarity", "scalar input"))?;
        let dot = dot.sum_axis(last)?;
        let na = self.l2_norm()?;
        let nb = other.l2_norm()?;
        if na.value().data().iter().chain(nb.value().data()).any(|&n| n == T::zero()) {
            return Err(Error::UndefinedSimilarity);
        }
        dot.div(&na.mul(&nb)?)
    }
}
