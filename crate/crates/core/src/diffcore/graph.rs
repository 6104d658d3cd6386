use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation. Operands always refer to earlier nodes.
#[derive(Clone, Debug)]
pub enum Op {
    Input {
        index: usize,
        cols: Option<usize>,
        differentiable: bool,
    },
    Param {
        slot: usize,
        shape: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    /// `x · w + b`, with `b` a single row broadcast over the rows of `x`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    /// Sum of every element, as a 1×1 tensor.
    SumAll(NodeId),
    /// Per-row sum, `rows × 1`.
    SumCols(NodeId),
    /// Per-column mean, `1 × cols`.
    MeanRows(NodeId),
    /// Column-wise concatenation.
    Concat(Vec<NodeId>),
    /// Per-row `log Σ exp`, `rows × 1`.
    LogSumExp(NodeId),
    Reshape {
        x: NodeId,
        cols: usize,
    },
    /// Each row repeated `times` times consecutively.
    RepeatRows {
        x: NodeId,
        times: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Tanh(_) => "tanh",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Clamp { .. } => "clamp",
            Op::SumAll(_) => "sum",
            Op::SumCols(_) => "sum_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::Concat(_) => "concat",
            Op::LogSumExp(_) => "logsumexp",
            Op::Reshape { .. } => "reshape",
            Op::RepeatRows { .. } => "repeat_rows",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::MeanRows(a)
            | Op::LogSumExp(a) => vec![*a],
            Op::Clamp { x, .. } | Op::Reshape { x, .. } | Op::RepeatRows { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

/// Which leaves `backward` should produce gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Params,
    Inputs,
    All,
}

impl Wrt {
    fn params(self) -> bool {
        matches!(self, Wrt::Params | Wrt::All)
    }

    fn inputs(self) -> bool {
        matches!(self, Wrt::Inputs | Wrt::All)
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// Keyed by parameter slot.
    pub params: BTreeMap<usize, Tensor<T>>,
    /// Indexed by input declaration order; `None` for non-differentiable inputs.
    pub inputs: Vec<Option<Tensor<T>>>,
}

/// A static computation graph over named parameter slots and positional
/// inputs. `forward` caches every node value so a later `backward` can
/// reuse them.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    ops: Vec<Op>,
    inputs: Vec<NodeId>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            inputs: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.operands().iter().all(|o| o.0 < self.ops.len()));
        self.values.clear();
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.ops[id.0]
    }

    /// Declares an input with a free row count and optionally fixed width.
    pub fn input(&mut self, cols: Option<usize>, differentiable: bool) -> NodeId {
        let index = self.inputs.len();
        let id = self.push(Op::Input {
            index,
            cols,
            differentiable,
        });
        self.inputs.push(id);
        id
    }

    pub fn param(&mut self, slot: usize, shape: &[usize]) -> NodeId {
        self.push(Op::Param {
            slot,
            shape: shape.to_vec(),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Offset(a, c))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scale(a, -1.0);
        self.offset(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumCols(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanRows(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a))
    }

    pub fn reshape(&mut self, x: NodeId, cols: usize) -> NodeId {
        self.push(Op::Reshape { x, cols })
    }

    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        self.push(Op::RepeatRows { x, times })
    }

    /// Binary entropy `-p ln p - (1-p) ln(1-p)` in nats, elementwise.
    pub fn binary_entropy(&mut self, p: NodeId) -> NodeId {
        let q = self.one_minus(p);
        let lp = self.log(p);
        let lq = self.log(q);
        let a = self.mul(p, lp);
        let b = self.mul(q, lq);
        let s = self.add(a, b);
        self.scale(s, -1.0)
    }

    pub fn is_evaluated(&self) -> bool {
        !self.ops.is_empty() && self.values.len() == self.ops.len()
    }

    /// Value of a node from the last `forward`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>, DiffError> {
        if !self.is_evaluated() {
            return Err(DiffError::NotEvaluated);
        }
        Ok(&self.values[id.0])
    }

    /// Evaluates every node. `params` is indexed by slot, `inputs` by
    /// declaration order.
    pub fn forward(&mut self, params: &[Tensor<T>], inputs: &[Tensor<T>]) -> Result<(), DiffError> {
        self.values.clear();
        if inputs.len() != self.inputs.len() {
            return Err(DiffError::ShapeMismatch(format!(
                "graph declares {} inputs, {} supplied",
                self.inputs.len(),
                inputs.len()
            )));
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = eval_op(op, &values, params, inputs)?;
            if !v.is_finite() {
                return Err(DiffError::NonFinite {
                    node: i,
                    op: op.name(),
                });
            }
            values.push(v);
        }
        self.values = values;
        Ok(())
    }

    /// Convenience: forward, then the value of `out`.
    pub fn eval(
        &mut self,
        params: &[Tensor<T>],
        inputs: &[Tensor<T>],
        out: NodeId,
    ) -> Result<Tensor<T>, DiffError> {
        self.forward(params, inputs)?;
        Ok(self.values[out.0].clone())
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the
    /// output's value).
    pub fn backward(
        &self,
        output: NodeId,
        seed: Tensor<T>,
        wrt: Wrt,
    ) -> Result<Gradients<T>, DiffError> {
        if !self.is_evaluated() {
            return Err(DiffError::NotEvaluated);
        }
        if seed.shape() != self.values[output.0].shape() {
            return Err(DiffError::ShapeMismatch(format!(
                "seed shape {:?} vs output shape {:?}",
                seed.shape(),
                self.values[output.0].shape()
            )));
        }
        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.ops[i] {
                Op::Param { .. } => wrt.params(),
                Op::Input { differentiable, .. } => wrt.inputs() && *differentiable,
                op => op.operands().iter().any(|o| needs[o.0]),
            };
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[output.0] = Some(seed);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Param { .. } | Op::Input { .. } => {
                    grads[i] = Some(g);
                }
                op => self.backprop_op(i, op, g, &needs, &mut grads)?,
            }
        }
        let mut out = Gradients {
            params: BTreeMap::new(),
            inputs: vec![None; self.inputs.len()],
        };
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGradient { node: i });
            }
            match &self.ops[i] {
                Op::Param { slot, .. } => match out.params.get_mut(slot) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        out.params.insert(*slot, g);
                    }
                },
                Op::Input { index, .. } => out.inputs[*index] = Some(g),
                _ => {}
            }
        }
        Ok(out)
    }

    fn backprop_op(
        &self,
        i: usize,
        op: &Op,
        g: Tensor<T>,
        needs: &[bool],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), DiffError> {
        let v = &self.values;
        let out = &v[i];
        match op {
            Op::MatMul(a, b) => {
                if needs[a.0] {
                    accumulate(grads, *a, g.matmul(&v[b.0], false, true)?);
                }
                if needs[b.0] {
                    accumulate(grads, *b, v[a.0].matmul(&g, true, false)?);
                }
            }
            Op::Affine { x, w, b } => {
                if needs[x.0] {
                    accumulate(grads, *x, g.matmul(&v[w.0], false, true)?);
                }
                if needs[w.0] {
                    let gw = v[x.0]
                        .matmul(&g, true, false)?
                        .reshape(v[w.0].shape().to_vec())?;
                    accumulate(grads, *w, gw);
                }
                if needs[b.0] {
                    let gb = column_sums(&g).reshape(v[b.0].shape().to_vec())?;
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if needs[a.0] {
                    accumulate(grads, *a, g.clone());
                }
                if needs[b.0] {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs[a.0] {
                    accumulate(grads, *a, g.clone());
                }
                if needs[b.0] {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    accumulate(grads, *a, g.zip_map(&v[b.0], |x, y| x * y));
                }
                if needs[b.0] {
                    accumulate(grads, *b, g.zip_map(&v[a.0], |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Offset(a, _) | Op::Reshape { x: a, .. } => {
                let shape = v[a.0].shape().to_vec();
                accumulate(grads, *a, g.reshape(shape)?);
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, g.zip_map(out, |d, s| d * s * (T::one() - s)));
            }
            Op::Softplus(a) => {
                accumulate(grads, *a, g.zip_map(&v[a.0], |d, x| d * sigmoid(x)));
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, g.zip_map(out, |d, t| d * (T::one() - t * t)));
            }
            Op::Log(a) => {
                accumulate(grads, *a, g.zip_map(&v[a.0], |d, x| d / x));
            }
            Op::Exp(a) => {
                accumulate(grads, *a, g.zip_map(out, |d, e| d * e));
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (T::of(*lo), T::of(*hi));
                accumulate(
                    grads,
                    *x,
                    g.zip_map(&v[x.0], |d, x| if x > lo && x < hi { d } else { T::zero() }),
                );
            }
            Op::SumAll(a) => {
                accumulate(grads, *a, Tensor::full(v[a.0].shape(), g.item()));
            }
            Op::SumCols(a) => {
                let src = &v[a.0];
                let mut t = Tensor::zeros(src.shape());
                let c = src.cols();
                for r in 0..src.rows() {
                    let d = g.data()[r];
                    t.data_mut()[r * c..(r + 1) * c].fill(d);
                }
                accumulate(grads, *a, t);
            }
            Op::MeanRows(a) => {
                let src = &v[a.0];
                let inv = T::of(1.0 / src.rows() as f64);
                let mut t = Tensor::zeros(src.shape());
                let c = src.cols();
                for r in 0..src.rows() {
                    for (dst, &d) in t.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.data()) {
                        *dst = d * inv;
                    }
                }
                accumulate(grads, *a, t);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let total = g.cols();
                for p in parts {
                    let pc = v[p.0].cols();
                    if needs[p.0] {
                        let rows = g.rows();
                        let mut data = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + pc],
                            );
                        }
                        accumulate(grads, *p, Tensor::new(v[p.0].shape().to_vec(), data)?);
                    }
                    offset += pc;
                }
            }
            Op::LogSumExp(a) => {
                let src = &v[a.0];
                let c = src.cols();
                let mut t = Tensor::zeros(src.shape());
                for r in 0..src.rows() {
                    let lse = out.data()[r].f64();
                    let d = g.data()[r].f64();
                    for (dst, &x) in t.row_mut(r).iter_mut().zip(&src.data()[r * c..(r + 1) * c]) {
                        *dst = T::of(d * (x.f64() - lse).exp());
                    }
                }
                accumulate(grads, *a, t);
            }
            Op::RepeatRows { x, times } => {
                let src = &v[x.0];
                let c = src.cols();
                let mut t = Tensor::zeros(src.shape());
                for r in 0..src.rows() {
                    for k in 0..*times {
                        let gr = g.row(r * times + k);
                        for (dst, &d) in t.data_mut()[r * c..(r + 1) * c].iter_mut().zip(gr) {
                            *dst = *dst + d;
                        }
                    }
                }
                accumulate(grads, *x, t);
            }
            Op::Input { .. } | Op::Param { .. } => unreachable!(),
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a = *a + b;
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut acc = vec![0.0f64; c];
    for r in 0..t.rows() {
        for (a, v) in acc.iter_mut().zip(t.row(r)) {
            *a += v.f64();
        }
    }
    Tensor::new(vec![1, c], acc.into_iter().map(T::of).collect()).expect("row vector")
}

fn same_shape<T: Scalar>(op: &Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch(format!(
            "{}: {:?} vs {:?}",
            op.name(),
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn eval_op<T: Scalar>(
    op: &Op,
    v: &[Tensor<T>],
    params: &[Tensor<T>],
    inputs: &[Tensor<T>],
) -> Result<Tensor<T>, DiffError> {
    Ok(match op {
        Op::Input { index, cols, .. } => {
            let t = &inputs[*index];
            if let Some(c) = cols {
                if t.cols() != *c || t.shape().len() != 2 {
                    return Err(DiffError::ShapeMismatch(format!(
                        "input {index}: expected {c} columns, got shape {:?}",
                        t.shape()
                    )));
                }
            }
            t.clone()
        }
        Op::Param { slot, shape } => {
            let t = params.get(*slot).ok_or_else(|| {
                DiffError::ShapeMismatch(format!("parameter slot {slot} not supplied"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(DiffError::ShapeMismatch(format!(
                    "parameter slot {slot}: expected {:?}, got {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.clone()
        }
        Op::MatMul(a, b) => v[a.0].matmul(&v[b.0], false, false)?,
        Op::Affine { x, w, b } => {
            let mut y = v[x.0].matmul(&v[w.0], false, false)?;
            let bias = &v[b.0];
            if bias.len() != y.cols() {
                return Err(DiffError::ShapeMismatch(format!(
                    "affine bias has {} values for {} outputs",
                    bias.len(),
                    y.cols()
                )));
            }
            let c = y.cols();
            for r in 0..y.rows() {
                for (o, &bb) in y.data_mut()[r * c..(r + 1) * c].iter_mut().zip(bias.data()) {
                    *o = *o + bb;
                }
            }
            y
        }
        Op::Add(a, b) => {
            same_shape(op, &v[a.0], &v[b.0])?;
            v[a.0].zip_map(&v[b.0], |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(op, &v[a.0], &v[b.0])?;
            v[a.0].zip_map(&v[b.0], |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(op, &v[a.0], &v[b.0])?;
            v[a.0].zip_map(&v[b.0], |x, y| x * y)
        }
        Op::Scale(a, c) => {
            let c = T::of(*c);
            v[a.0].map(|x| x * c)
        }
        Op::Offset(a, c) => {
            let c = T::of(*c);
            v[a.0].map(|x| x + c)
        }
        Op::Sigmoid(a) => v[a.0].map(sigmoid),
        Op::Softplus(a) => v[a.0].map(softplus),
        Op::Tanh(a) => v[a.0].map(|x| x.tanh()),
        Op::Log(a) => v[a.0].map(|x| x.ln()),
        Op::Exp(a) => v[a.0].map(|x| x.exp()),
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (T::of(*lo), T::of(*hi));
            v[x.0].map(|x| x.max(lo).min(hi))
        }
        Op::SumAll(a) => Tensor::scalar(T::of(v[a.0].sum_f64())),
        Op::SumCols(a) => {
            let src = &v[a.0];
            let data = (0..src.rows())
                .map(|r| T::of(src.row(r).iter().map(|x| x.f64()).sum()))
                .collect();
            Tensor::matrix(src.rows(), 1, data)?
        }
        Op::MeanRows(a) => {
            let src = &v[a.0];
            if src.rows() == 0 {
                return Err(DiffError::ShapeMismatch("mean over zero rows".into()));
            }
            let sums = column_sums(src);
            let inv = 1.0 / src.rows() as f64;
            sums.map(|s| T::of(s.f64() * inv))
        }
        Op::Concat(parts) => {
            let rows = v[parts[0].0].rows();
            if parts.iter().any(|p| v[p.0].rows() != rows) {
                return Err(DiffError::ShapeMismatch("concat row counts differ".into()));
            }
            let total: usize = parts.iter().map(|p| v[p.0].cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(v[p.0].row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        }
        Op::LogSumExp(a) => {
            let src = &v[a.0];
            let data = (0..src.rows())
                .map(|r| T::of(logsumexp(src.row(r).iter().map(|x| x.f64()))))
                .collect();
            Tensor::matrix(src.rows(), 1, data)?
        }
        Op::Reshape { x, cols } => {
            let src = &v[x.0];
            if *cols == 0 || !src.len().is_multiple_of(*cols) {
                return Err(DiffError::ShapeMismatch(format!(
                    "cannot reshape {} values into rows of {cols}",
                    src.len()
                )));
            }
            src.clone().reshape(vec![src.len() / cols, *cols])?
        }
        Op::RepeatRows { x, times } => v[x.0].repeat_rows(*times),
    })
}

/// Numerically stable `log Σ exp(x)` with max subtraction.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max.is_infinite() {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}
