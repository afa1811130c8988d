use std::collections::HashMap;

use rand::{Rng as _, SeedableRng};

use super::array::Array2;
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Exp,
    Ln,
    Square,
    Abs,
    Sin,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    /// Differentiable leaf bound at forward time.
    Leaf(String),
    /// Differentiable leaf with its value attached at build time.
    Param(String, Array2),
    Constant(Array2),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Unary(NodeId, Unary),
    SumAll(NodeId),
    MeanAll(NodeId),
    SoftmaxRows(NodeId),
    Dropout { x: NodeId, rate: f64, seed: u64 },
    SliceReshape { x: NodeId, offset: usize, rows: usize, cols: usize },
    Scatter { len: usize, parts: Vec<(NodeId, Vec<usize>)> },
    GatherRows(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Param(..) => "param",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Unary(..) => "unary",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Dropout { .. } => "dropout",
            Op::SliceReshape { .. } => "slice_reshape",
            Op::Scatter { .. } => "scatter",
            Op::GatherRows(..) => "gather_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Param(..) | Op::Constant(_) => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Unary(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _) => vec![*a],
            Op::Dropout { x, .. } | Op::SliceReshape { x, .. } => vec![*x],
            Op::Scatter { parts, .. } => parts.iter().map(|(n, _)| *n).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Built,
    Forwarded,
    Differentiated,
}

/// Values bound to named leaves at forward time.
pub type Bindings = HashMap<String, Array2>;

/// Append-only record of array operations.
///
/// Build the graph with the constructor methods, run [`Tape::forward`],
/// then [`Tape::backward`] once. Nodes are evaluated in append order and
/// differentiated in exact reverse append order.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    values: Vec<Option<Array2>>,
    masks: Vec<Option<Array2>>,
    state: State,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, one slot per node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2>>,
    leaves: HashMap<String, NodeId>,
}

impl Gradients {
    /// Gradient at `node`, or `None` when nothing flows into it.
    pub fn get(&self, node: NodeId) -> Option<&Array2> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2> {
        self.leaves.get(name).and_then(|n| self.get(*n))
    }

    /// Takes the gradient out, leaving `None` behind.
    pub fn take(&mut self, node: NodeId) -> Option<Array2> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            requires_grad: Vec::new(),
            values: Vec::new(),
            masks: Vec::new(),
            state: State::Built,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let rg = match &op {
            Op::Leaf(_) | Op::Param(..) => true,
            Op::Constant(_) => false,
            other => other.inputs().iter().any(|n| self.requires_grad[n.0]),
        };
        self.ops.push(op);
        self.requires_grad.push(rg);
        self.state = State::Built;
        NodeId(self.ops.len() - 1)
    }

    /// Differentiable leaf whose value is supplied in the forward bindings.
    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf(name.into()))
    }

    /// Differentiable leaf with its value attached now.
    pub fn param(&mut self, name: impl Into<String>, value: Array2) -> NodeId {
        self.push(Op::Param(name.into(), value))
    }

    pub fn constant(&mut self, value: Array2) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(a, bias))
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

    pub fn unary(&mut self, a: NodeId, f: Unary) -> NodeId {
        self.push(Op::Unary(a, f))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Relu)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Unary::Scale(c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SoftmaxRows(a))
    }

    /// Inverted dropout. The mask seed is drawn from `rng` now; the mask
    /// itself is realized at forward time. Eval mode and `rate == 0` return
    /// `x` itself.
    pub fn dropout(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
        check_rate(rate)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let seed = rng.random();
        Ok(self.push(Op::Dropout { x, rate, seed }))
    }

    /// Reinterprets `rows * cols` consecutive entries of the row-major data
    /// of `x`, starting at `offset`, as a `rows x cols` array.
    pub fn slice_reshape(&mut self, x: NodeId, offset: usize, rows: usize, cols: usize) -> NodeId {
        self.push(Op::SliceReshape {
            x,
            offset,
            rows,
            cols,
        })
    }

    /// Builds a `1 x len` row whose entries at `indices` come from the
    /// flattened part values; uncovered entries are zero.
    pub fn scatter(&mut self, len: usize, parts: Vec<(NodeId, Vec<usize>)>) -> NodeId {
        self.push(Op::Scatter { len, parts })
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows(x, rows))
    }

    /// Value computed for `node` by the last forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Array2> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    /// Clears cached values so the tape can be run again.
    pub fn reset(&mut self) {
        self.values.clear();
        self.masks.clear();
        self.state = State::Built;
    }

    fn label(&self, i: usize) -> String {
        match &self.ops[i] {
            Op::Leaf(n) | Op::Param(n, _) => format!("node {i} ({} '{n}')", self.ops[i].name()),
            op => format!("node {i} ({})", op.name()),
        }
    }

    /// Evaluates every node in append order and returns the value of the
    /// last node.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<Array2> {
        if self.ops.is_empty() {
            return Err(Error::Usage("forward on an empty tape".into()));
        }
        self.values = Vec::with_capacity(self.ops.len());
        self.masks = vec![None; self.ops.len()];
        for i in 0..self.ops.len() {
            let (v, mask) = self.eval_node(i, bindings)?;
            self.masks[i] = mask;
            if !v.is_finite() {
                self.state = State::Built;
                return Err(Error::NonFinite {
                    node: self.label(i),
                });
            }
            self.values.push(Some(v));
        }
        self.state = State::Forwarded;
        Ok(self.values.last().cloned().flatten().expect("value present"))
    }

    fn val(&self, n: NodeId) -> &Array2 {
        self.values[n.0].as_ref().expect("inputs precede their consumers")
    }

    fn eval_node(&self, i: usize, bindings: &Bindings) -> Result<(Array2, Option<Array2>)> {
        let label = || self.label(i);
        let mut mask_out = None;
        let out = match &self.ops[i] {
            Op::Leaf(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Usage(format!("no binding for leaf '{name}'")))?,
            Op::Param(_, v) | Op::Constant(v) => v.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.cols() != b.rows() {
                    return Err(shape_err(
                        label(),
                        format!("{}x{} · {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
                    ));
                }
                a.matmul(b)?
            }
            Op::AddRow(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(shape_err(
                        label(),
                        format!("bias {}x{} for {}x{}", b.rows(), b.cols(), a.rows(), a.cols()),
                    ));
                }
                let mut out = a.clone();
                let bias = b.data();
                for r in 0..out.rows() {
                    for (o, bv) in out.row_mut(r).iter_mut().zip(bias) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (an, bn) = (self.val(*a), self.val(*b));
                if an.shape() != bn.shape() {
                    return Err(shape_err(
                        label(),
                        format!("{:?} vs {:?}", an.shape(), bn.shape()),
                    ));
                }
                match &self.ops[i] {
                    Op::Add(..) => an.zip_map(bn, |x, y| x + y),
                    Op::Sub(..) => an.zip_map(bn, |x, y| x - y),
                    _ => an.zip_map(bn, |x, y| x * y),
                }
            }
            Op::Unary(a, f) => {
                let a = self.val(*a);
                match *f {
                    Unary::LeakyRelu(s) => a.map(|x| if x > 0.0 { x } else { s * x }),
                    Unary::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
                    Unary::Tanh => a.map(f64::tanh),
                    Unary::Exp => a.map(f64::exp),
                    Unary::Ln => a.map(f64::ln),
                    Unary::Square => a.map(|x| x * x),
                    Unary::Abs => a.map(f64::abs),
                    Unary::Sin => a.map(f64::sin),
                    Unary::Scale(c) => a.map(|x| c * x),
                    Unary::AddScalar(c) => a.map(|x| x + c),
                }
            }
            Op::SumAll(a) => Array2::scalar(self.val(*a).sum()),
            Op::MeanAll(a) => {
                let a = self.val(*a);
                if a.data().is_empty() {
                    return Err(shape_err(label(), "mean of an empty array"));
                }
                Array2::scalar(a.sum() / a.data().len() as f64)
            }
            Op::SoftmaxRows(a) => softmax_rows(self.val(*a)),
            Op::Dropout { x, rate, seed } => {
                let xv = self.val(*x);
                let mut rng = Rng::seed_from_u64(*seed);
                let mask = dropout_mask(xv.rows(), xv.cols(), *rate, &mut rng);
                let out = xv.zip_map(&mask, |a, m| a * m);
                mask_out = Some(mask);
                out
            }
            Op::SliceReshape {
                x,
                offset,
                rows,
                cols,
            } => {
                let xv = self.val(*x);
                let end = offset + rows * cols;
                if end > xv.data().len() {
                    return Err(shape_err(
                        label(),
                        format!("slice {offset}..{end} of {} entries", xv.data().len()),
                    ));
                }
                Array2::new(*rows, *cols, xv.data()[*offset..end].to_vec())?
            }
            Op::Scatter { len, parts } => {
                let mut out = vec![0.0; *len];
                for (n, idx) in parts {
                    let v = self.val(*n);
                    if v.data().len() != idx.len() || idx.iter().any(|&j| j >= *len) {
                        return Err(shape_err(
                            label(),
                            format!("{} values for {} slots of {len}", v.data().len(), idx.len()),
                        ));
                    }
                    for (&j, &x) in idx.iter().zip(v.data()) {
                        out[j] = x;
                    }
                }
                Array2::row_vector(out)
            }
            Op::GatherRows(x, rows) => {
                let xv = self.val(*x);
                if let Some(bad) = rows.iter().find(|&&r| r >= xv.rows()) {
                    return Err(shape_err(
                        label(),
                        format!("row {bad} of {}", xv.rows()),
                    ));
                }
                xv.select_rows(rows)
            }
        };
        Ok((out, mask_out))
    }

    /// Propagates `seed_grad` (the gradient of some scalar with respect to
    /// the last node) back to every node. Allowed once per forward pass.
    pub fn backward(&mut self, seed_grad: &Array2) -> Result<Gradients> {
        match self.state {
            State::Built => return Err(Error::Usage("backward called before forward".into())),
            State::Differentiated => {
                return Err(Error::Usage(
                    "backward called twice without a new forward pass".into(),
                ))
            }
            State::Forwarded => {}
        }
        let n = self.ops.len();
        let out_shape = self.val(NodeId(n - 1)).shape();
        if seed_grad.shape() != out_shape {
            return Err(shape_err(
                "backward seed",
                format!("{:?} for output {:?}", seed_grad.shape(), out_shape),
            ));
        }
        let mut grads: Vec<Option<Array2>> = vec![None; n];
        grads[n - 1] = Some(seed_grad.clone());
        for i in (0..n).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.state = State::Differentiated;
        let leaves = self
            .ops
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match op {
                Op::Leaf(name) | Op::Param(name, _) => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, leaves })
    }

    fn backprop_node(&self, i: usize, g: &Array2, grads: &mut [Option<Array2>]) {
        let rg = &self.requires_grad;
        let acc = |node: NodeId, d: Array2, grads: &mut [Option<Array2>]| {
            if !rg[node.0] {
                return;
            }
            match &mut grads[node.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &self.ops[i] {
            Op::Leaf(_) | Op::Param(..) | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                if rg[a.0] {
                    acc(*a, g.matmul_nt(self.val(*b)), grads);
                }
                if rg[b.0] {
                    acc(*b, self.val(*a).matmul_tn(g), grads);
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone(), grads);
                if rg[b.0] {
                    let mut db = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*b, Array2::row_vector(db), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if rg[a.0] {
                    acc(*a, g.zip_map(self.val(*b), |x, y| x * y), grads);
                }
                if rg[b.0] {
                    acc(*b, g.zip_map(self.val(*a), |x, y| x * y), grads);
                }
            }
            Op::Unary(a, f) => {
                let x = self.val(*a);
                let y = self.val(NodeId(i));
                let d = match *f {
                    Unary::LeakyRelu(s) => g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { s * gv }),
                    Unary::Relu => g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                    Unary::Tanh => g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)),
                    Unary::Exp => g.zip_map(y, |gv, yv| gv * yv),
                    Unary::Ln => g.zip_map(x, |gv, xv| gv / xv),
                    Unary::Square => g.zip_map(x, |gv, xv| 2.0 * gv * xv),
                    Unary::Abs => g.zip_map(x, |gv, xv| gv * sign(xv)),
                    Unary::Sin => g.zip_map(x, |gv, xv| gv * xv.cos()),
                    Unary::Scale(c) => g.map(|gv| c * gv),
                    Unary::AddScalar(_) => g.clone(),
                };
                acc(*a, d, grads);
            }
            Op::SumAll(a) => {
                let (r, c) = self.val(*a).shape();
                acc(*a, Array2::filled(r, c, g.data()[0]), grads);
            }
            Op::MeanAll(a) => {
                let (r, c) = self.val(*a).shape();
                acc(*a, Array2::filled(r, c, g.data()[0] / (r * c) as f64), grads);
            }
            Op::SoftmaxRows(a) => {
                let y = self.val(NodeId(i));
                let mut d = Array2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, d, grads);
            }
            Op::Dropout { x, .. } => {
                let mask = self.masks[i].as_ref().expect("mask realized in forward");
                acc(*x, g.zip_map(mask, |a, m| a * m), grads);
            }
            Op::SliceReshape { x, offset, .. } => {
                let (r, c) = self.val(*x).shape();
                let mut d = Array2::zeros(r, c);
                d.data_mut()[*offset..offset + g.data().len()].copy_from_slice(g.data());
                acc(*x, d, grads);
            }
            Op::Scatter { parts, .. } => {
                for (n, idx) in parts {
                    if !rg[n.0] {
                        continue;
                    }
                    let (r, c) = self.val(*n).shape();
                    let data = idx.iter().map(|&j| g.data()[j]).collect();
                    acc(*n, Array2::new(r, c, data).expect("shape checked in forward"), grads);
                }
            }
            Op::GatherRows(x, rows) => {
                let (r, c) = self.val(*x).shape();
                let mut d = Array2::zeros(r, c);
                for (k, &src) in rows.iter().enumerate() {
                    for (o, v) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, d, grads);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Array2) -> Array2 {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Draws an inverted-dropout mask entry by entry in row-major order: an
/// entry is dropped when its uniform draw falls below `rate`, survivors are
/// scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Array2 {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Array2::new(rows, cols, data).expect("sized above")
}

/// Inverted dropout on a plain array.
pub fn dropout(x: &Array2, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Array2> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.rows(), x.cols(), rate, rng);
    Ok(x.zip_map(&mask, |a, m| a * m))
}
