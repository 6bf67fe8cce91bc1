use std::collections::{BTreeMap, HashMap};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Input {
        name: String,
        shape: Vec<usize>,
        trainable: bool,
    },
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Affine(NodeId, NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Unary(NodeId, Unary),
    Clamp(NodeId, f64, f64),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    BatchMatVec {
        mats: NodeId,
        vecs: NodeId,
        rows: usize,
        cols: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "broadcast_add",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Unary(_, u) => match u {
                Unary::Relu => "relu",
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Square => "square",
            },
            Op::Clamp(..) => "clamp",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::BatchMatVec { .. } => "batch_matvec",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::Unary(a, _)
            | Op::Clamp(a, ..)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::SliceCols(a, ..)
            | Op::SliceRows(a, ..) => vec![*a],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::BatchMatVec { mats, vecs, .. } => vec![*mats, *vecs],
            Op::Affine(x, w, b) => vec![*x, *w, *b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Source of tensors for a graph's named inputs.
pub trait Bindings {
    fn get(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for HashMap<String, Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        HashMap::get(self, name)
    }
}

impl Bindings for BTreeMap<String, Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        BTreeMap::get(self, name)
    }
}

/// Looks up the first binding, then the second.
impl<A: Bindings, B: Bindings> Bindings for (&A, &B) {
    fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name).or_else(|| self.1.get(name))
    }
}

/// A recorded computation: nodes in topological order by construction.
///
/// Building a graph never fails; shape errors surface in [`Graph::forward`]
/// with the offending node named.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Per-node values produced by a forward pass.
#[derive(Clone, Debug)]
pub struct Values {
    values: Vec<Tensor>,
    outputs: BTreeMap<String, NodeId>,
}

impl Values {
    pub fn get(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.values[node.0].item()
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|id| &self.values[id.0])
    }

    /// Named outputs, consuming the value store.
    pub fn into_outputs(self) -> BTreeMap<String, Tensor> {
        let mut values: Vec<Option<Tensor>> = self.values.into_iter().map(Some).collect();
        self.outputs
            .into_iter()
            .map(|(name, id)| {
                let t = values[id.0].take().expect("output bound twice");
                (name, t)
            })
            .collect()
    }
}

/// Adjoints of the loss with respect to graph inputs, keyed by input name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(input.0 < self.nodes.len(), "node input from another graph");
        }
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn declare(&mut self, name: &str, shape: &[usize], trainable: bool) -> NodeId {
        assert!(
            !self.inputs.contains_key(name),
            "input `{name}` declared twice"
        );
        let id = self.push(Op::Input {
            name: name.to_string(),
            shape: shape.to_vec(),
            trainable,
        });
        self.nodes[id.0].label = Some(name.to_string());
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Data input; no gradient is reported for it by [`Graph::backward`].
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.declare(name, shape, false)
    }

    /// Trainable input.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.declare(name, shape, true)
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    /// Names and shapes of all declared inputs.
    pub fn input_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        self.inputs
            .values()
            .map(|id| match &self.nodes[id.0].op {
                Op::Input {
                    name,
                    shape,
                    trainable,
                } => (name.clone(), shape.clone(), *trainable),
                _ => unreachable!(),
            })
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn label(&mut self, node: NodeId, label: &str) -> NodeId {
        self.nodes[node.0].label = Some(label.to_string());
        node
    }

    pub fn output(&mut self, name: &str, node: NodeId) -> NodeId {
        self.outputs.insert(name.to_string(), node);
        node
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// `x * w` plus the row vector `b` added to every row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine(x, w, b))
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

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    /// Multiplies every entry of `a` by the one-element node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        self.push(Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::AddConst(a, k))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn unary(&mut self, a: NodeId, u: Unary) -> NodeId {
        self.push(Op::Unary(a, u))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Log)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo < hi);
        self.push(Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax of a rank-2 node.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Sum of each row: `[r, c] -> [r, 1]`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        assert!(len > 0);
        self.push(Op::SliceCols(a, start, len))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        assert!(len > 0);
        self.push(Op::SliceRows(a, start, len))
    }

    /// Row `b` of the result is `M_b v_b`, where `M_b` is row `b` of `mats`
    /// read as a row-major `rows x cols` matrix and `v_b` is row `b` of `vecs`.
    pub fn batch_matvec(&mut self, mats: NodeId, vecs: NodeId, rows: usize, cols: usize) -> NodeId {
        self.push(Op::BatchMatVec {
            mats,
            vecs,
            rows,
            cols,
        })
    }

    fn node_name(&self, id: NodeId) -> String {
        match &self.nodes[id.0].label {
            Some(l) => format!("#{} `{}`", id.0, l),
            None => format!("#{}", id.0),
        }
    }

    /// True if `node`'s value is a function of `target`.
    pub fn depends_on(&self, node: NodeId, target: NodeId) -> bool {
        if target.0 > node.0 {
            return false;
        }
        let mut seen = vec![false; node.0 + 1];
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if n == target {
                return true;
            }
            if std::mem::replace(&mut seen[n.0], true) {
                continue;
            }
            stack.extend(
                self.nodes[n.0]
                    .op
                    .inputs()
                    .into_iter()
                    .filter(|i| i.0 >= target.0),
            );
        }
        false
    }

    /// Evaluates every node.
    pub fn forward<B: Bindings + ?Sized>(&self, inputs: &B) -> Result<Values> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let v = self.eval(id, &node.op, &values, inputs)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: self.node_name(id),
                    op: node.op.name(),
                });
            }
            values.push(v);
        }
        Ok(Values {
            values,
            outputs: self.outputs.clone(),
        })
    }

    fn shape_err(&self, id: NodeId, op: &Op, detail: String) -> Error {
        Error::Shape {
            node: self.node_name(id),
            op: op.name(),
            detail,
        }
    }

    fn eval<B: Bindings + ?Sized>(
        &self,
        id: NodeId,
        op: &Op,
        vals: &[Tensor],
        inputs: &B,
    ) -> Result<Tensor> {
        let v = |n: &NodeId| &vals[n.0];
        let dims = |n: &NodeId| -> Result<(usize, usize)> {
            vals[n.0].dims2().ok_or_else(|| {
                self.shape_err(id, op, format!("operand has rank > 2: {:?}", vals[n.0].shape()))
            })
        };
        let same = |a: &NodeId, b: &NodeId| -> Result<()> {
            if vals[a.0].shape() != vals[b.0].shape() {
                return Err(self.shape_err(
                    id,
                    op,
                    format!("{:?} vs {:?}", vals[a.0].shape(), vals[b.0].shape()),
                ));
            }
            Ok(())
        };
        Ok(match op {
            Op::Input { name, shape, .. } => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(self.shape_err(
                        id,
                        op,
                        format!("bound {:?}, declared {:?}", t.shape(), shape),
                    ));
                }
                t.clone()
            }
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (m, k) = dims(a)?;
                let (k2, n) = dims(b)?;
                if k != k2 {
                    return Err(self.shape_err(id, op, format!("[{m}, {k}] x [{k2}, {n}]")));
                }
                let mut out = vec![0.0; m * n];
                gemm(false, false, m, k, n, 1.0, v(a).data(), v(b).data(), 0.0, &mut out);
                Tensor::matrix(m, n, out)
            }
            Op::Affine(x, w, b) => {
                let (m, k) = dims(x)?;
                let (k2, n) = dims(w)?;
                if k != k2 || v(b).len() != n {
                    return Err(self.shape_err(
                        id,
                        op,
                        format!("[{m}, {k}] x [{k2}, {n}] + {:?}", v(b).shape()),
                    ));
                }
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(v(b).data());
                }
                gemm(false, false, m, k, n, 1.0, v(x).data(), v(w).data(), 1.0, &mut out);
                Tensor::matrix(m, n, out)
            }
            Op::Add(a, b) => {
                same(a, b)?;
                v(a).zip_map(v(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same(a, b)?;
                v(a).zip_map(v(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same(a, b)?;
                v(a).zip_map(v(b), |x, y| x * y)
            }
            Op::AddRow(a, row) => {
                let (r, c) = dims(a)?;
                if v(row).len() != c {
                    return Err(self.shape_err(
                        id,
                        op,
                        format!("row {:?} for matrix [{r}, {c}]", v(row).shape()),
                    ));
                }
                let rv = v(row).data();
                let mut out = v(a).clone();
                for chunk in out.data_mut().chunks_exact_mut(c) {
                    for (o, b) in chunk.iter_mut().zip(rv) {
                        *o += b;
                    }
                }
                out
            }
            Op::MulScalar(a, s) => {
                if !v(s).is_scalar() {
                    return Err(self.shape_err(id, op, format!("scalar operand {:?}", v(s).shape())));
                }
                let k = v(s).item();
                v(a).map(|x| x * k)
            }
            Op::Scale(a, k) => v(a).map(|x| x * k),
            Op::AddConst(a, k) => v(a).map(|x| x + k),
            Op::Unary(a, u) => match u {
                Unary::Relu => v(a).map(|x| x.max(0.0)),
                Unary::Sigmoid => v(a).map(sigmoid),
                Unary::Tanh => v(a).map(f64::tanh),
                Unary::Exp => v(a).map(f64::exp),
                Unary::Log => v(a).map(f64::ln),
                Unary::Square => v(a).map(|x| x * x),
            },
            Op::Clamp(a, lo, hi) => v(a).map(|x| x.clamp(*lo, *hi)),
            Op::Softmax(a) => {
                let (_, c) = dims(a)?;
                let mut out = v(a).clone();
                for row in out.data_mut().chunks_exact_mut(c) {
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                }
                out
            }
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Mean(a) => Tensor::scalar(v(a).sum() / v(a).len() as f64),
            Op::RowSum(a) => {
                let (r, c) = dims(a)?;
                let data = v(a).data().chunks_exact(c).map(|row| row.iter().sum()).collect();
                Tensor::matrix(r, 1, data)
            }
            Op::ConcatCols(xs) => {
                let mut shapes = Vec::with_capacity(xs.len());
                for x in xs {
                    shapes.push(dims(x)?);
                }
                let r = shapes[0].0;
                if shapes.iter().any(|s| s.0 != r) {
                    return Err(self.shape_err(id, op, format!("row counts differ: {shapes:?}")));
                }
                let total: usize = shapes.iter().map(|s| s.1).sum();
                let mut out = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (x, &(_, c)) in xs.iter().zip(&shapes) {
                        out.extend_from_slice(&v(x).data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::matrix(r, total, out)
            }
            Op::ConcatRows(xs) => {
                let mut shapes = Vec::with_capacity(xs.len());
                for x in xs {
                    shapes.push(dims(x)?);
                }
                let c = shapes[0].1;
                if shapes.iter().any(|s| s.1 != c) {
                    return Err(self.shape_err(id, op, format!("column counts differ: {shapes:?}")));
                }
                let total: usize = shapes.iter().map(|s| s.0).sum();
                let mut out = Vec::with_capacity(total * c);
                for x in xs {
                    out.extend_from_slice(v(x).data());
                }
                Tensor::matrix(total, c, out)
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = dims(a)?;
                if start + len > c {
                    return Err(self.shape_err(id, op, format!("cols {start}..{} of {c}", start + len)));
                }
                let mut out = Vec::with_capacity(r * len);
                for row in v(a).data().chunks_exact(c) {
                    out.extend_from_slice(&row[*start..start + len]);
                }
                Tensor::matrix(r, *len, out)
            }
            Op::SliceRows(a, start, len) => {
                let (r, c) = dims(a)?;
                if start + len > r {
                    return Err(self.shape_err(id, op, format!("rows {start}..{} of {r}", start + len)));
                }
                Tensor::matrix(*len, c, v(a).data()[start * c..(start + len) * c].to_vec())
            }
            Op::BatchMatVec {
                mats,
                vecs,
                rows,
                cols,
            } => {
                let (b, mc) = dims(mats)?;
                let (b2, vc) = dims(vecs)?;
                if b != b2 || mc != rows * cols || vc != *cols {
                    return Err(self.shape_err(
                        id,
                        op,
                        format!("mats [{b}, {mc}], vecs [{b2}, {vc}] for {rows}x{cols} blocks"),
                    ));
                }
                let mut out = vec![0.0; b * rows];
                let md = v(mats).data();
                let vd = v(vecs).data();
                for k in 0..b {
                    let m = &md[k * mc..(k + 1) * mc];
                    let x = &vd[k * cols..(k + 1) * cols];
                    for i in 0..*rows {
                        out[k * rows + i] =
                            m[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
                    }
                }
                Tensor::matrix(b, *rows, out)
            }
        })
    }

    /// Reverse-mode gradient of a scalar `loss` w.r.t. every trainable input.
    /// Inputs the loss does not depend on receive zero tensors.
    pub fn backward(&self, values: &Values, loss: NodeId) -> Result<Gradients> {
        let wanted: Vec<NodeId> = self
            .inputs
            .values()
            .copied()
            .filter(|id| matches!(self.nodes[id.0].op, Op::Input { trainable: true, .. }))
            .collect();
        self.backward_nodes(values, loss, &wanted)
    }

    /// Gradient w.r.t. the named inputs, trainable or not.
    pub fn backward_wrt(&self, values: &Values, loss: NodeId, names: &[&str]) -> Result<Gradients> {
        let mut wanted = Vec::with_capacity(names.len());
        for name in names {
            wanted.push(
                self.input_id(name)
                    .ok_or_else(|| Error::UnboundInput(name.to_string()))?,
            );
        }
        self.backward_nodes(values, loss, &wanted)
    }

    fn backward_nodes(&self, values: &Values, loss: NodeId, wanted: &[NodeId]) -> Result<Gradients> {
        let lv = values.get(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: self.node_name(loss),
                shape: lv.shape().to_vec(),
            });
        }
        // Only propagate into nodes that lie on a path to a wanted input.
        let mut needs = vec![false; loss.0 + 1];
        for w in wanted {
            if w.0 <= loss.0 {
                needs[w.0] = true;
            }
        }
        for i in 0..=loss.0 {
            if !needs[i] {
                needs[i] = self.nodes[i].op.inputs().iter().any(|j| needs[j.0]);
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]));
        let mut found: BTreeMap<NodeId, Tensor> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = &self.nodes[i].op;
            if let Op::Input { .. } = op {
                found.insert(NodeId(i), g);
                continue;
            }
            self.propagate(NodeId(i), op, g, values, &needs, &mut adj);
        }

        let mut grads = BTreeMap::new();
        for w in wanted {
            let name = match &self.nodes[w.0].op {
                Op::Input { name, .. } => name.clone(),
                _ => unreachable!(),
            };
            let g = found
                .remove(w)
                .unwrap_or_else(|| Tensor::zeros(values.get(*w).shape()));
            grads.insert(name, g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        id: NodeId,
        op: &Op,
        g: Tensor,
        values: &Values,
        needs: &[bool],
        adj: &mut [Option<Tensor>],
    ) {
        let val = |n: NodeId| values.get(n);
        if let Op::MatMul(a, b) | Op::Affine(a, b, _) = *op {
            let (m, k) = val(a).dims2().unwrap();
            let (_, n) = val(b).dims2().unwrap();
            if needs[a.0] {
                let (beta, slot) = accum_slot(&mut adj[a.0], val(a));
                gemm(false, true, m, n, k, 1.0, g.data(), val(b).data(), beta, slot.data_mut());
            }
            if needs[b.0] {
                let (beta, slot) = accum_slot(&mut adj[b.0], val(b));
                gemm(true, false, k, m, n, 1.0, val(a).data(), g.data(), beta, slot.data_mut());
            }
            if let Op::Affine(_, _, bias) = *op {
                if needs[bias.0] {
                    let slot = adj[bias.0].get_or_insert_with(|| Tensor::zeros(val(bias).shape()));
                    for chunk in g.data().chunks_exact(n) {
                        for (d, x) in slot.data_mut().iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
            return;
        }
        if let Op::SliceCols(a, start, len) | Op::SliceRows(a, start, len) = *op {
            if !needs[a.0] {
                return;
            }
            let x = val(a);
            let (_, c) = x.dims2().unwrap();
            let slot = adj[a.0].get_or_insert_with(|| Tensor::zeros(x.shape()));
            let d = slot.data_mut();
            if matches!(op, Op::SliceRows(..)) {
                for (o, gi) in d[start * c..(start + len) * c].iter_mut().zip(g.data()) {
                    *o += gi;
                }
            } else {
                for (drow, grow) in d.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                    for (o, gi) in drow[start..start + len].iter_mut().zip(grow) {
                        *o += gi;
                    }
                }
            }
            return;
        }
        let mut acc = |n: NodeId, t: Tensor| {
            if !needs[n.0] {
                return;
            }
            match &mut adj[n.0] {
                Some(x) => x.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let need = |n: &NodeId| needs[n.0];
        match op {
            Op::Input { .. } | Op::Const(_) => {}
            Op::MatMul(..) | Op::Affine(..) => unreachable!(),
            Op::Add(a, b) => {
                if need(b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if need(b) {
                    acc(*b, g.map(|x| -x));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if need(a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if need(b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if need(row) {
                    let c = val(*row).len();
                    let mut dr = vec![0.0; c];
                    for chunk in g.data().chunks_exact(c) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    acc(*row, Tensor::new(val(*row).shape().to_vec(), dr));
                }
                acc(*a, g);
            }
            Op::MulScalar(a, s) => {
                if need(s) {
                    let ds: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Tensor::new(val(*s).shape().to_vec(), vec![ds]));
                }
                if need(a) {
                    let k = val(*s).item();
                    acc(*a, g.map(|x| x * k));
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::AddConst(a, _) => acc(*a, g),
            Op::Unary(a, u) => {
                let x = val(*a);
                let y = values.get(id);
                let d = match u {
                    Unary::Relu => g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    Unary::Sigmoid => g.zip_map(y, |g, y| g * y * (1.0 - y)),
                    Unary::Tanh => g.zip_map(y, |g, y| g * (1.0 - y * y)),
                    Unary::Exp => g.zip_map(y, |g, y| g * y),
                    Unary::Log => g.zip_map(x, |g, x| g / x),
                    Unary::Square => g.zip_map(x, |g, x| 2.0 * g * x),
                };
                acc(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = values.get(id);
                let (_, c) = y.dims2().unwrap();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let s = g.item() / val(*a).len() as f64;
                acc(*a, Tensor::full(val(*a).shape(), s));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                let mut d = Vec::with_capacity(r * c);
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi, c));
                }
                acc(*a, Tensor::new(val(*a).shape().to_vec(), d));
            }
            Op::ConcatCols(xs) => {
                let (r, total) = g.dims2().unwrap();
                let mut offset = 0;
                for x in xs {
                    let (_, c) = val(*x).dims2().unwrap();
                    if need(x) {
                        let mut d = Vec::with_capacity(r * c);
                        for row in g.data().chunks_exact(total) {
                            d.extend_from_slice(&row[offset..offset + c]);
                        }
                        acc(*x, Tensor::new(val(*x).shape().to_vec(), d));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let n = val(*x).len();
                    if need(x) {
                        let d = g.data()[offset..offset + n].to_vec();
                        acc(*x, Tensor::new(val(*x).shape().to_vec(), d));
                    }
                    offset += n;
                }
            }
            Op::SliceCols(..) | Op::SliceRows(..) => unreachable!(),
            Op::BatchMatVec {
                mats,
                vecs,
                rows,
                cols,
            } => {
                let md = val(*mats).data();
                let vd = val(*vecs).data();
                let gd = g.data();
                let b = gd.len() / rows;
                let mc = rows * cols;
                if need(mats) {
                    let mut dm = vec![0.0; b * mc];
                    for k in 0..b {
                        for i in 0..*rows {
                            let gi = gd[k * rows + i];
                            let dst = &mut dm[k * mc + i * cols..k * mc + (i + 1) * cols];
                            for (d, x) in dst.iter_mut().zip(&vd[k * cols..(k + 1) * cols]) {
                                *d = gi * x;
                            }
                        }
                    }
                    acc(*mats, Tensor::new(val(*mats).shape().to_vec(), dm));
                }
                if need(vecs) {
                    let mut dv = vec![0.0; b * cols];
                    for k in 0..b {
                        let dst = &mut dv[k * cols..(k + 1) * cols];
                        for i in 0..*rows {
                            let gi = gd[k * rows + i];
                            let m = &md[k * mc + i * cols..k * mc + (i + 1) * cols];
                            for (d, mv) in dst.iter_mut().zip(m) {
                                *d += gi * mv;
                            }
                        }
                    }
                    acc(*vecs, Tensor::new(val(*vecs).shape().to_vec(), dv));
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Existing adjoint slot to accumulate into (`beta = 1`), or a fresh one.
fn accum_slot<'a>(slot: &'a mut Option<Tensor>, like: &Tensor) -> (f64, &'a mut Tensor) {
    let beta = if slot.is_some() { 1.0 } else { 0.0 };
    (beta, slot.get_or_insert_with(|| Tensor::zeros(like.shape())))
}
