use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{AutodiffError, Tensor};

/// Names of the recorded primitives, used in errors and gradient reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Offset,
    MatVec,
    EuclideanNorm,
    Tanh,
    Reciprocal,
    Log,
    Sigmoid,
    Clamp,
    Sum,
    SumLast,
    Gather,
    SelectMinIndex,
    Reshape,
    Concat,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Offset => "offset",
            Primitive::MatVec => "matvec",
            Primitive::EuclideanNorm => "euclidean_norm",
            Primitive::Tanh => "tanh",
            Primitive::Reciprocal => "reciprocal",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Clamp => "clamp",
            Primitive::Sum => "sum",
            Primitive::SumLast => "sum_last",
            Primitive::Gather => "gather",
            Primitive::SelectMinIndex => "select_min_index",
            Primitive::Reshape => "reshape",
            Primitive::Concat => "concat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_PRIMITIVES.iter().copied().find(|p| p.name() == name)
    }
}

pub const ALL_PRIMITIVES: [Primitive; 19] = [
    Primitive::Leaf,
    Primitive::Add,
    Primitive::Sub,
    Primitive::Mul,
    Primitive::Scale,
    Primitive::Offset,
    Primitive::MatVec,
    Primitive::EuclideanNorm,
    Primitive::Tanh,
    Primitive::Reciprocal,
    Primitive::Log,
    Primitive::Sigmoid,
    Primitive::Clamp,
    Primitive::Sum,
    Primitive::SumLast,
    Primitive::Gather,
    Primitive::SelectMinIndex,
    Primitive::Reshape,
    Primitive::Concat,
];

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static FAULT: Cell<Option<Primitive>> = const { Cell::new(None) };
}

/// Flips the sign of one primitive's backward rule on the current thread.
///
/// Exists so the gradient checker can prove it detects a broken derivative.
#[doc(hidden)]
pub fn inject_backward_fault(primitive: Option<Primitive>) {
    FAULT.with(|f| f.set(primitive));
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatVec { matrix: usize, input: usize },
    Norm(usize),
    Tanh(usize),
    Reciprocal(usize),
    Log(usize),
    Sigmoid(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Sum(usize),
    SumLast(usize),
    Gather { input: usize, ids: Vec<usize> },
    SelectMin { input: usize, ids: Vec<usize> },
    Reshape(usize),
    Concat(Vec<usize>),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf | Op::Constant => Primitive::Leaf,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Offset(..) => Primitive::Offset,
            Op::MatVec { .. } => Primitive::MatVec,
            Op::Norm(..) => Primitive::EuclideanNorm,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Reciprocal(..) => Primitive::Reciprocal,
            Op::Log(..) => Primitive::Log,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Clamp { .. } => Primitive::Clamp,
            Op::Sum(..) => Primitive::Sum,
            Op::SumLast(..) => Primitive::SumLast,
            Op::Gather { .. } => Primitive::Gather,
            Op::SelectMin { .. } => Primitive::SelectMinIndex,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Concat(..) => Primitive::Concat,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive applications.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape belongs to one thread; build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.tape.add(self, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.tape.sub(self, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.tape.mul(self, other)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>, AutodiffError> {
        self.tape.scale(self, factor)
    }

    pub fn offset(self, shift: f64) -> Result<Var<'t>, AutodiffError> {
        self.tape.offset(self, shift)
    }

    pub fn tanh(self) -> Result<Var<'t>, AutodiffError> {
        self.tape.tanh(self)
    }

    pub fn reciprocal(self) -> Result<Var<'t>, AutodiffError> {
        self.tape.reciprocal(self)
    }

    pub fn sum(self) -> Result<Var<'t>, AutodiffError> {
        self.tape.sum(self)
    }
}

/// Gradients of a scalar root with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `var`; a leaf the root does not reach gets zeros.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.leaves
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn shape_err(primitive: Primitive, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        primitive,
        detail: detail.into(),
    }
}

/// Index and value of the smallest entry; ties go to the lowest index.
pub fn select_min_index(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    (best, values[best])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn check_owner(&self, var: Var<'_>) -> Result<(), AutodiffError> {
        if std::ptr::eq(self, var.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn value_of(&self, var: Var<'_>) -> Result<Rc<Tensor>, AutodiffError> {
        self.check_owner(var)?;
        Ok(self.nodes.borrow()[var.id].value.clone())
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn push(
        &self,
        primitive: Primitive,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_>, AutodiffError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NumericFault { primitive });
        }
        let value = Tensor::new(shape, data)?;
        let requires_grad = self.needs_grad(inputs);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        primitive: Primitive,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>), AutodiffError> {
        let (x, y) = (self.value_of(a)?, self.value_of(b)?);
        if x.shape() != y.shape() {
            return Err(shape_err(
                primitive,
                format!("operands {:?} and {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok((x.shape().to_vec(), data))
    }

    fn unary(
        &self,
        a: Var<'_>,
        f: impl Fn(f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>), AutodiffError> {
        let x = self.value_of(a)?;
        Ok((x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()))
    }

    pub fn add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.binary(a, b, Primitive::Add, |p, q| p + q)?;
        self.push(Primitive::Add, shape, data, Op::Add(a.id, b.id), &[a.id, b.id])
    }

    pub fn sub<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.binary(a, b, Primitive::Sub, |p, q| p - q)?;
        self.push(Primitive::Sub, shape, data, Op::Sub(a.id, b.id), &[a.id, b.id])
    }

    pub fn mul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.binary(a, b, Primitive::Mul, |p, q| p * q)?;
        self.push(Primitive::Mul, shape, data, Op::Mul(a.id, b.id), &[a.id, b.id])
    }

    pub fn scale<'t>(&'t self, a: Var<'t>, factor: f64) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.unary(a, |v| v * factor)?;
        self.push(Primitive::Scale, shape, data, Op::Scale(a.id, factor), &[a.id])
    }

    pub fn offset<'t>(&'t self, a: Var<'t>, shift: f64) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.unary(a, |v| v + shift)?;
        self.push(Primitive::Offset, shape, data, Op::Offset(a.id), &[a.id])
    }

    /// Applies a `[r, n]` matrix to every length-`n` row of `input`.
    ///
    /// A rank-1 input yields a rank-1 output of length `r`; a `[.., n]`
    /// input yields `[.., r]`.
    pub fn matvec<'t>(&'t self, matrix: Var<'t>, input: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (m, x) = (self.value_of(matrix)?, self.value_of(input)?);
        let prim = Primitive::MatVec;
        if m.shape().len() != 2 {
            return Err(shape_err(prim, format!("matrix must be rank 2, got {:?}", m.shape())));
        }
        let (r, n) = (m.shape()[0], m.shape()[1]);
        let Some(&last) = x.shape().last() else {
            return Err(shape_err(prim, "input must have rank >= 1"));
        };
        if last != n {
            return Err(shape_err(
                prim,
                format!("matrix {:?} against input {:?}", m.shape(), x.shape()),
            ));
        }
        let batch = x.len() / n;
        let mut out = vec![0.0; batch * r];
        for (xb, ob) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(r)) {
            for (o, mrow) in ob.iter_mut().zip(m.data().chunks_exact(n)) {
                *o = mrow.iter().zip(xb).map(|(p, q)| p * q).sum();
            }
        }
        let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
        shape.push(r);
        self.push(
            prim,
            shape,
            out,
            Op::MatVec {
                matrix: matrix.id,
                input: input.id,
            },
            &[matrix.id, input.id],
        )
    }

    /// Euclidean norm over the last axis.
    pub fn euclidean_norm<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let x = self.value_of(a)?;
        let prim = Primitive::EuclideanNorm;
        let Some(&d) = x.shape().last() else {
            return Err(shape_err(prim, "input must have rank >= 1"));
        };
        let out = x
            .data()
            .chunks_exact(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = x.shape()[..x.shape().len() - 1].to_vec();
        self.push(prim, shape, out, Op::Norm(a.id), &[a.id])
    }

    pub fn tanh<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.unary(a, f64::tanh)?;
        self.push(Primitive::Tanh, shape, data, Op::Tanh(a.id), &[a.id])
    }

    pub fn reciprocal<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.unary(a, f64::recip)?;
        self.push(Primitive::Reciprocal, shape, data, Op::Reciprocal(a.id), &[a.id])
    }

    pub fn log<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.unary(a, f64::ln)?;
        self.push(Primitive::Log, shape, data, Op::Log(a.id), &[a.id])
    }

    pub fn sigmoid<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.unary(a, |v| 1.0 / (1.0 + (-v).exp()))?;
        self.push(Primitive::Sigmoid, shape, data, Op::Sigmoid(a.id), &[a.id])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the window.
    pub fn clamp<'t>(&'t self, a: Var<'t>, lo: f64, hi: f64) -> Result<Var<'t>, AutodiffError> {
        let (shape, data) = self.unary(a, |v| v.clamp(lo, hi))?;
        self.push(
            Primitive::Clamp,
            shape,
            data,
            Op::Clamp { input: a.id, lo, hi },
            &[a.id],
        )
    }

    /// Sum of every entry, as a scalar.
    pub fn sum<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let x = self.value_of(a)?;
        let total = x.data().iter().sum();
        self.push(Primitive::Sum, Vec::new(), vec![total], Op::Sum(a.id), &[a.id])
    }

    /// Sum over the last axis.
    pub fn sum_last<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let x = self.value_of(a)?;
        let prim = Primitive::SumLast;
        let Some(&d) = x.shape().last() else {
            return Err(shape_err(prim, "input must have rank >= 1"));
        };
        let out = x.data().chunks_exact(d).map(|r| r.iter().sum()).collect();
        let shape = x.shape()[..x.shape().len() - 1].to_vec();
        self.push(prim, shape, out, Op::SumLast(a.id), &[a.id])
    }

    /// Selects rows along the leading axis. Ids may repeat.
    pub fn gather<'t>(&'t self, a: Var<'t>, ids: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let x = self.value_of(a)?;
        let prim = Primitive::Gather;
        if x.shape().is_empty() {
            return Err(shape_err(prim, "cannot gather from a scalar"));
        }
        if ids.is_empty() {
            return Err(shape_err(prim, "empty id list"));
        }
        let rows = x.shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err(prim, format!("id {bad} out of range for {rows} rows")));
        }
        let w = x.row_len();
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = ids.len();
        self.push(
            prim,
            shape,
            out,
            Op::Gather {
                input: a.id,
                ids: ids.to_vec(),
            },
            &[a.id],
        )
    }

    /// Row-wise minimum over the last axis, returning the value and the
    /// index of the minimizer. The index is a constant for differentiation.
    pub fn select_min_index<'t>(
        &'t self,
        a: Var<'t>,
    ) -> Result<(Var<'t>, Vec<usize>), AutodiffError> {
        let x = self.value_of(a)?;
        let prim = Primitive::SelectMinIndex;
        let Some(&c) = x.shape().last() else {
            return Err(shape_err(prim, "input must have rank >= 1"));
        };
        let (ids, mins): (Vec<usize>, Vec<f64>) =
            x.data().chunks_exact(c).map(select_min_index).unzip();
        let shape = x.shape()[..x.shape().len() - 1].to_vec();
        let var = self.push(
            prim,
            shape,
            mins,
            Op::SelectMin {
                input: a.id,
                ids: ids.clone(),
            },
            &[a.id],
        )?;
        Ok((var, ids))
    }

    pub fn reshape<'t>(&'t self, a: Var<'t>, shape: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let x = self.value_of(a)?;
        let count: usize = shape.iter().product();
        if count != x.len() || shape.contains(&0) {
            return Err(shape_err(
                Primitive::Reshape,
                format!("{:?} into {shape:?}", x.shape()),
            ));
        }
        self.push(
            Primitive::Reshape,
            shape.to_vec(),
            x.data().to_vec(),
            Op::Reshape(a.id),
            &[a.id],
        )
    }

    /// Stacks tensors along the leading axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let prim = Primitive::Concat;
        let Some(first) = parts.first() else {
            return Err(shape_err(prim, "no inputs"));
        };
        let head = self.value_of(*first)?;
        if head.shape().is_empty() {
            return Err(shape_err(prim, "cannot concatenate scalars"));
        }
        let tail = head.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value_of(*p)?;
            if v.shape().len() != head.shape().len() || v.shape()[1..] != tail[..] {
                return Err(shape_err(
                    prim,
                    format!("{:?} does not stack with {:?}", v.shape(), head.shape()),
                ));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(prim, shape, data, Op::Concat(ids.clone()), &ids)
    }

    /// Reverse pass from a scalar root.
    ///
    /// The tape is not modified, so repeated calls return identical
    /// gradients.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AutodiffError> {
        self.check_owner(root)?;
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let fault = FAULT.with(|f| f.get());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let sign = if fault == Some(node.op.primitive()) { -1.0 } else { 1.0 };
            let mut acc = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += sign * c;
                        }
                    }
                    slot @ None => {
                        *slot = Some(if sign < 0.0 {
                            contrib.into_iter().map(|c| -c).collect()
                        } else {
                            contrib
                        });
                    }
                }
            };
            let val = |i: usize| nodes[i].value.data();
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|v| -v).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (val(*a), val(*b));
                    acc(*a, g.iter().zip(xb).map(|(g, q)| g * q).collect());
                    acc(*b, g.iter().zip(xa).map(|(g, p)| g * p).collect());
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Offset(a) | Op::Reshape(a) => acc(*a, g),
                Op::MatVec { matrix, input } => {
                    let (m, x) = (&nodes[*matrix].value, val(*input));
                    let (r, n) = (m.shape()[0], m.shape()[1]);
                    if nodes[*matrix].requires_grad {
                        let mut gm = vec![0.0; r * n];
                        for (gb, xb) in g.chunks_exact(r).zip(x.chunks_exact(n)) {
                            for (gmrow, &gi) in gm.chunks_exact_mut(n).zip(gb) {
                                for (e, &xj) in gmrow.iter_mut().zip(xb) {
                                    *e += gi * xj;
                                }
                            }
                        }
                        acc(*matrix, gm);
                    }
                    if nodes[*input].requires_grad {
                        let mut gx = vec![0.0; x.len()];
                        for (gb, gxb) in g.chunks_exact(r).zip(gx.chunks_exact_mut(n)) {
                            for (mrow, &gi) in m.data().chunks_exact(n).zip(gb) {
                                for (e, &mij) in gxb.iter_mut().zip(mrow) {
                                    *e += gi * mij;
                                }
                            }
                        }
                        acc(*input, gx);
                    }
                }
                Op::Norm(a) => {
                    let x = val(*a);
                    let d = x.len() / y.len();
                    let mut gx = vec![0.0; x.len()];
                    for (((gxr, xr), &n), &gr) in
                        gx.chunks_exact_mut(d).zip(x.chunks_exact(d)).zip(y).zip(&g)
                    {
                        // zero-length rows get a zero subgradient
                        if n > 0.0 {
                            for (e, &xi) in gxr.iter_mut().zip(xr) {
                                *e = gr * xi / n;
                            }
                        }
                    }
                    acc(*a, gx);
                }
                Op::Tanh(a) => acc(*a, g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
                Op::Reciprocal(a) => acc(*a, g.iter().zip(y).map(|(g, r)| -g * r * r).collect()),
                Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
                Op::Sigmoid(a) => {
                    acc(*a, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())
                }
                Op::Clamp { input, lo, hi } => {
                    let x = val(*input);
                    acc(
                        *input,
                        g.iter()
                            .zip(x)
                            .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                            .collect(),
                    )
                }
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
                Op::SumLast(a) => {
                    let n = val(*a).len();
                    let d = n / g.len();
                    acc(*a, g.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect());
                }
                Op::Gather { input, ids } => {
                    let n = val(*input).len();
                    let w = n / nodes[*input].value.rows();
                    let mut gx = vec![0.0; n];
                    for (gr, &i) in g.chunks_exact(w).zip(ids) {
                        for (e, v) in gx[i * w..(i + 1) * w].iter_mut().zip(gr) {
                            *e += v;
                        }
                    }
                    acc(*input, gx);
                }
                Op::SelectMin { input, ids } => {
                    let n = val(*input).len();
                    let c = n / g.len();
                    let mut gx = vec![0.0; n];
                    for (r, (&gr, &i)) in g.iter().zip(ids).enumerate() {
                        gx[r * c + i] = gr;
                    }
                    acc(*input, gx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc(p, g[start..start + len].to_vec());
                        start += len;
                    }
                }
            }
        }
        // differentiable leaves the root never reached
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                leaves
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves })
    }
}
