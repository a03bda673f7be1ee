use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{contract_err, shape_err, MtcError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, shared by every model of a run.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return contract_err(format!("duplicate parameter name {name}"));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn zero_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.tensors[id.0].zero_grad();
        }
    }

    pub fn zero_all_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Square,
    Sigmoid,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Binary(BinaryKind, Broadcast, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    Shift(Var),
    Min(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation so gradients can be replayed in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` is a single reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    trainable: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
    variable_grads: HashMap<usize, Vec<f64>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            trainable: HashMap::new(),
            frozen: HashMap::new(),
            variable_grads: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the post-op finiteness check (on by default in
    /// debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Gradient of a leaf created with [`Tape::variable`], after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.variable_grads.get(&v.0).map(Vec::as_slice)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(MtcError::Numerical(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rows = t.rows();
        let cols = t.cols();
        self.push_unchecked(Tensor::raw(rows, cols, t.into_data()), Op::Constant)
    }

    /// A leaf whose gradient is kept on the tape and readable via [`Tape::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let rows = t.rows();
        let cols = t.cols();
        self.push_unchecked(Tensor::raw(rows, cols, t.into_data()), Op::Variable)
    }

    /// Binds a trainable parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.trainable.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::raw(t.rows(), t.cols(), t.data().to_vec());
        let v = self.push_unchecked(value, Op::Param(id));
        self.trainable.insert(id, v);
        v
    }

    /// Binds a parameter as a constant (gradient blocked).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::raw(t.rows(), t.cols(), t.data().to_vec());
        let v = self.push_unchecked(value, Op::Constant);
        self.frozen.insert(id, v);
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_unchecked(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return shape_err(format!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        self.push(Tensor::raw(m, n, out), Op::MatMul(a, b))
    }

    /// `x + row`, with `row` of shape `1 × cols(x)` added to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(row) != (1, n) {
            return shape_err(format!("add_row: {m}x{n} with {:?}", self.shape(row)));
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        self.push(Tensor::raw(m, n, out), Op::AddRow(x, row))
    }

    /// `x * row`, elementwise per row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(row) != (1, n) {
            return shape_err(format!("mul_row: {m}x{n} with {:?}", self.shape(row)));
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a * b))
            .collect();
        self.push(Tensor::raw(m, n, out), Op::MulRow(x, row))
    }

    fn broadcast(&self, a: Var, b: Var) -> Result<(Broadcast, usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok((Broadcast::Same, sa.0, sa.1))
        } else if sa == (1, 1) {
            Ok((Broadcast::LhsScalar, sb.0, sb.1))
        } else if sb == (1, 1) {
            Ok((Broadcast::RhsScalar, sa.0, sa.1))
        } else {
            shape_err(format!("incompatible operands {sa:?} and {sb:?}"))
        }
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (mode, m, n) = self.broadcast(a, b)?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = match mode {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::LhsScalar => bv.iter().map(|&y| f(av[0], y)).collect(),
            Broadcast::RhsScalar => av.iter().map(|&x| f(x, bv[0])).collect(),
        };
        self.push(Tensor::raw(m, n, out), Op::Binary(kind, mode, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let xs = self.value(x).data();
        if kind == UnaryKind::Log {
            if let Some(bad) = xs.iter().find(|&&v| v <= 0.0) {
                return Err(MtcError::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let out: Vec<f64> = xs.iter().map(|&v| unary_forward(kind, v)).collect();
        self.push(Tensor::raw(m, n, out), Op::Unary(kind, x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(Tensor::raw(m, n, out), Op::Scale(x, c))
    }

    /// Adds a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        let out = self.value(x).data().iter().map(|v| v + c).collect();
        self.push(Tensor::raw(m, n, out), Op::Shift(x))
    }

    /// Elementwise minimum of two same-shape values.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return shape_err("minimum needs equal shapes");
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.min(*y))
            .collect();
        self.push(Tensor::raw(m, n, out), Op::Min(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let out = self.value(x).data().chunks_exact(n).map(|r| r.iter().sum()).collect();
        self.push(Tensor::raw(m, 1, out), Op::SumCols(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start >= end || end > n {
            return shape_err(format!("slice_cols {start}..{end} of {n} columns"));
        }
        let w = end - start;
        let out = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        self.push(Tensor::raw(m, w, out), Op::SliceCols(x, start))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start >= end || end > m {
            return shape_err(format!("slice_rows {start}..{end} of {m} rows"));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        self.push(Tensor::raw(end - start, n, out), Op::SliceRows(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let m = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != m) {
            return shape_err("concat_cols needs equal row counts");
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor::raw(m, n, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let n = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != n) {
            return shape_err("concat_rows needs equal column counts");
        }
        let m: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::raw(m, n, out), Op::ConcatRows(parts.to_vec()))
    }

    /// Per-row standardization (zero mean, unit variance), without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks_exact(n) {
            let (mu, sd) = row_stats(row, eps);
            out.extend(row.iter().map(|v| (v - mu) / sd));
        }
        self.push(Tensor::raw(m, n, out), Op::LayerNorm(x, eps))
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Parameter gradients are added to the store (`+=`); gradients of
    /// [`Tape::variable`] leaves are added to the tape's own buffers.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Variable => match self.variable_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.variable_grads.insert(i, g);
                    }
                },
                Op::Param(id) => {
                    let t = store.get_mut(*id);
                    if t.requires_grad() {
                        t.accumulate_grad(&g);
                    }
                }
                op => backprop(&self.nodes, &node.value, op, &g, &mut grads),
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Variable => "variable",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Binary(BinaryKind::Add, ..) => "add",
        Op::Binary(BinaryKind::Sub, ..) => "sub",
        Op::Binary(BinaryKind::Mul, ..) => "mul",
        Op::Unary(UnaryKind::Tanh, _) => "tanh",
        Op::Unary(UnaryKind::Relu, _) => "relu",
        Op::Unary(UnaryKind::Softplus, _) => "softplus",
        Op::Unary(UnaryKind::Exp, _) => "exp",
        Op::Unary(UnaryKind::Log, _) => "log",
        Op::Unary(UnaryKind::Square, _) => "square",
        Op::Unary(UnaryKind::Sigmoid, _) => "sigmoid",
        Op::Unary(UnaryKind::Neg, _) => "neg",
        Op::Scale(..) => "scale",
        Op::Shift(..) => "shift",
        Op::Min(..) => "minimum",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumCols(_) => "sum_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::LayerNorm(..) => "layer_norm",
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + eps).sqrt())
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: UnaryKind, v: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => v.tanh(),
        UnaryKind::Relu => v.max(0.0),
        UnaryKind::Softplus => softplus(v),
        UnaryKind::Exp => v.exp(),
        UnaryKind::Log => v.ln(),
        UnaryKind::Square => v * v,
        UnaryKind::Sigmoid => sigmoid(v),
        UnaryKind::Neg => -v,
    }
}

fn unary_backward(kind: UnaryKind, x: f64, y: f64, g: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => g * (1.0 - y * y),
        UnaryKind::Relu => {
            if x > 0.0 {
                g
            } else {
                0.0
            }
        }
        UnaryKind::Softplus => g * sigmoid(x),
        UnaryKind::Exp => g * y,
        UnaryKind::Log => g / x,
        UnaryKind::Square => 2.0 * x * g,
        UnaryKind::Sigmoid => g * y * (1.0 - y),
        UnaryKind::Neg => -g,
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: impl IntoIterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => grads[v.0] = Some(g.into_iter().collect()),
    }
}

fn backprop(nodes: &[Node], out: &Tensor, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match op {
        Op::Constant | Op::Variable | Op::Param(_) => unreachable!("leaves handled by caller"),
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            let bd = val(*b).data();
            let ad = val(*a).data();
            // dA += G · Bᵀ
            let ga = slot(grads, *a, m * k);
            gemm(m, n, k, g, (n as isize, 1), bd, (1, n as isize), ga);
            // dB += Aᵀ · G
            let gb = slot(grads, *b, k * n);
            gemm(k, m, n, ad, (1, k as isize), g, (n as isize, 1), gb);
        }
        Op::AddRow(x, row) => {
            let n = out.cols();
            accumulate(grads, *x, g.iter().copied());
            let gr = slot(grads, *row, n);
            for chunk in g.chunks_exact(n) {
                gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
        }
        Op::MulRow(x, row) => {
            let n = out.cols();
            let r = val(*row).data();
            let xd = val(*x).data();
            accumulate(grads, *x, g.chunks_exact(n).flat_map(|c| c.iter().zip(r).map(|(a, b)| a * b)));
            let gr = slot(grads, *row, n);
            for (gc, xc) in g.chunks_exact(n).zip(xd.chunks_exact(n)) {
                for j in 0..n {
                    gr[j] += gc[j] * xc[j];
                }
            }
        }
        Op::Binary(kind, mode, a, b) => {
            let ad = val(*a).data();
            let bd = val(*b).data();
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                BinaryKind::Add => (g.to_vec(), g.to_vec()),
                BinaryKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                BinaryKind::Mul => match mode {
                    Broadcast::Same => (
                        g.iter().zip(bd).map(|(x, y)| x * y).collect(),
                        g.iter().zip(ad).map(|(x, y)| x * y).collect(),
                    ),
                    Broadcast::LhsScalar => (
                        g.iter().zip(bd).map(|(x, y)| x * y).collect(),
                        g.iter().map(|x| x * ad[0]).collect(),
                    ),
                    Broadcast::RhsScalar => (
                        g.iter().map(|x| x * bd[0]).collect(),
                        g.iter().zip(ad).map(|(x, y)| x * y).collect(),
                    ),
                },
            };
            match mode {
                Broadcast::Same => {
                    accumulate(grads, *a, ga);
                    accumulate(grads, *b, gb);
                }
                Broadcast::LhsScalar => {
                    accumulate(grads, *a, [ga.iter().sum::<f64>()]);
                    accumulate(grads, *b, gb);
                }
                Broadcast::RhsScalar => {
                    accumulate(grads, *a, ga);
                    accumulate(grads, *b, [gb.iter().sum::<f64>()]);
                }
            }
        }
        Op::Unary(kind, x) => {
            let xd = val(*x).data();
            let yd = out.data();
            accumulate(
                grads,
                *x,
                g.iter().zip(xd).zip(yd).map(|((&gi, &xi), &yi)| unary_backward(*kind, xi, yi, gi)),
            );
        }
        Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c)),
        Op::Shift(x) => accumulate(grads, *x, g.iter().copied()),
        Op::Min(a, b) => {
            let ad = val(*a).data();
            let bd = val(*b).data();
            let pick_a: Vec<bool> = ad.iter().zip(bd).map(|(x, y)| x <= y).collect();
            accumulate(grads, *a, g.iter().zip(&pick_a).map(|(v, &p)| if p { *v } else { 0.0 }));
            accumulate(grads, *b, g.iter().zip(&pick_a).map(|(v, &p)| if p { 0.0 } else { *v }));
        }
        Op::Sum(x) => {
            let len = val(*x).numel();
            accumulate(grads, *x, std::iter::repeat_n(g[0], len));
        }
        Op::Mean(x) => {
            let len = val(*x).numel();
            accumulate(grads, *x, std::iter::repeat_n(g[0] / len as f64, len));
        }
        Op::SumCols(x) => {
            let n = val(*x).cols();
            accumulate(grads, *x, g.iter().flat_map(|&v| std::iter::repeat_n(v, n)));
        }
        Op::SliceCols(x, start) => {
            let n = val(*x).cols();
            let w = out.cols();
            let gx = slot(grads, *x, val(*x).numel());
            for (r, chunk) in g.chunks_exact(w).enumerate() {
                let dst = &mut gx[r * n + start..r * n + start + w];
                dst.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
        }
        Op::SliceRows(x, start) => {
            let n = val(*x).cols();
            let gx = slot(grads, *x, val(*x).numel());
            let dst = &mut gx[start * n..start * n + g.len()];
            dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Op::ConcatCols(parts) => {
            let n = out.cols();
            let mut offset = 0;
            for p in parts {
                let w = val(*p).cols();
                accumulate(
                    grads,
                    *p,
                    g.chunks_exact(n).flat_map(|row| row[offset..offset + w].iter().copied()),
                );
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).numel();
                accumulate(grads, *p, g[offset..offset + len].iter().copied());
                offset += len;
            }
        }
        Op::LayerNorm(x, eps) => {
            let n = out.cols();
            let xd = val(*x).data();
            let mut gx = Vec::with_capacity(xd.len());
            for ((xr, yr), gr) in xd.chunks_exact(n).zip(out.data().chunks_exact(n)).zip(g.chunks_exact(n)) {
                let (_, sd) = row_stats(xr, *eps);
                let mean_g = gr.iter().sum::<f64>() / n as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                gx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - mean_g - yi * mean_gy) / sd));
            }
            accumulate(grads, *x, gx);
        }
    }
}

/// `c += a · b` for an `m × k` by `k × n` product with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable from the
    // (row, column) strides, all of which describe dense row- or
    // column-major layouts of exactly these extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.input(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.input(t(&[vec![2.0], vec![3.0]]));
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);

        let a = tape.input(t(&[vec![1.0, 2.0]]));
        let c = tape.input(t(&[vec![3.0], vec![4.0]]));
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(2, 3));
        let b = tape.input(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(MtcError::Shape(_))));
    }

    #[test]
    fn elementwise_values_and_grads() {
        let cases = [
            (UnaryKind::Tanh, 0.0, 0.0, 1.0),
            (UnaryKind::Softplus, 0.0, std::f64::consts::LN_2, 0.5),
            (UnaryKind::Relu, -3.0, 0.0, 0.0),
        ];
        for (kind, x, y, dy) in cases {
            let mut store = ParamStore::new();
            let mut tape = Tape::new();
            let v = tape.variable(Tensor::scalar(x));
            let out = tape.unary(kind, v).unwrap();
            assert!((tape.value(out).item() - y).abs() < 1e-12, "{kind:?}");
            tape.backward(out, &mut store).unwrap();
            assert!((tape.grad(v).unwrap()[0] - dy).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn log_domain_and_broadcast_errors() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[vec![1.0, 0.0]]));
        assert!(matches!(tape.log(x), Err(MtcError::Domain(_))));
        let a = tape.input(Tensor::zeros(2, 2));
        let b = tape.input(Tensor::zeros(1, 2));
        assert!(matches!(tape.add(a, b), Err(MtcError::Shape(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.variable(t(&[vec![1.0, 2.0]]));
        let s = tape.sum(x).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.variable(t(&[vec![1.0, 2.0]]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        // a second sweep accumulates
        tape.backward(s, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(1, 2));
        assert!(matches!(tape.backward(x, &mut store), Err(MtcError::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(3.0)).unwrap();
        let u = store.insert("u", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let uv = tape.frozen_param(&store, u);
        let y = tape.mul(wv, uv).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(w).grad(), Some(&[2.0][..]));
        assert!(store.get(u).grad().is_none());
    }

    #[test]
    fn finiteness_is_flagged() {
        let mut tape = Tape::new();
        tape.set_check_finite(true);
        let x = tape.input(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(MtcError::Numerical(_))));
    }
}
