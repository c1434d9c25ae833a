//! Expression graphs with reverse-mode differentiation.
//!
//! A `Graph` is an append-only arena of nodes; node constructors validate
//! shapes eagerly, so a successfully built expression always has a
//! well-defined output shape. Leaves are bound by name at evaluation time.
//! Graphs and arrays are immutable once built and safe to share across
//! threads; each `evaluate`/`gradient` call is single-threaded and pure.

use std::collections::{BTreeMap, HashMap};

use super::array::Array;
use super::EngineError;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Leaf values supplied at evaluation time, keyed by leaf name.
pub type Bindings = BTreeMap<String, Array>;

/// Denominator floor shared by every cosine-similarity construction.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String, differentiable: bool },
    Const(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId, usize),
    LogSumExp(NodeId),
    Dot(NodeId, NodeId),
    Norm(NodeId),
    RowNorms(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Row(NodeId, usize),
    Index(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Pack(Vec<NodeId>),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Relu(_) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Dot(..) => "dot",
            Op::Norm(_) => "norm",
            Op::RowNorms(_) => "row_norms",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Affine { .. } => "affine",
            Op::Row(..) => "row",
            Op::Index(..) => "index",
            Op::Gather(..) => "gather",
            Op::Pack(_) => "pack",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a, _)
            | Op::LogSumExp(a)
            | Op::Norm(a)
            | Op::RowNorms(a)
            | Op::Transpose(a)
            | Op::Row(a, _)
            | Op::Index(a, _)
            | Op::Gather(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Dot(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Pack(ids) => ids.clone(),
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// An acyclic expression graph over named leaves and inline constants.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf_inner(
        &mut self,
        name: &str,
        shape: &[usize],
        differentiable: bool,
    ) -> Result<NodeId, EngineError> {
        if let Some(&id) = self.leaves.get(name) {
            let node = &self.nodes[id.0];
            let same = match &node.op {
                Op::Leaf { differentiable: d, .. } => {
                    *d == differentiable && node.shape == shape
                }
                _ => false,
            };
            return if same {
                Ok(id)
            } else {
                Err(EngineError::DuplicateLeaf(name.to_string()))
            };
        }
        let id = self.push(
            Op::Leaf { name: name.to_string(), differentiable },
            shape.to_vec(),
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// A named differentiable input.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, EngineError> {
        self.leaf_inner(name, shape, true)
    }

    /// A named input marked constant: `gradient` refuses it, `numeric_gradient`
    /// reports zeros for it.
    pub fn frozen_leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, EngineError> {
        self.leaf_inner(name, shape, false)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(value))
    }

    fn binary_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>, EngineError> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa == sb {
            Ok(sa.to_vec())
        } else if sa.is_empty() {
            Ok(sb.to_vec())
        } else if sb.is_empty() {
            Ok(sa.to_vec())
        } else {
            Err(EngineError::ShapeMismatch(format!(
                "{op}: incompatible shapes {sa:?} and {sb:?} (only scalar-with-array broadcasts)"
            )))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let shape = self.binary_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let shape = self.binary_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let shape = self.binary_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let shape = self.binary_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b), shape))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, EngineError> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, EngineError> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Sqrt(a), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Relu(a), shape)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::ClampMin(a, floor), shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        if self.shape_of(a).iter().product::<usize>() == 0 {
            return Err(EngineError::EmptyInput("mean of empty array".into()));
        }
        Ok(self.push(Op::Mean(a), vec![]))
    }

    /// Softmax along `axis`. Rank-1 arrays use axis 0; rank-2 arrays allow
    /// axis 0 (down columns) or 1 (across rows).
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, EngineError> {
        let shape = self.shape_of(a).to_vec();
        match (shape.len(), axis) {
            (1, 0) | (2, 0) | (2, 1) => Ok(self.push(Op::Softmax(a, axis), shape)),
            _ => Err(EngineError::ShapeMismatch(format!(
                "softmax: axis {axis} invalid for shape {shape:?}"
            ))),
        }
    }

    /// Max-shifted log-sum-exp of a rank-1 array.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        let shape = self.shape_of(a);
        if shape.len() != 1 || shape[0] == 0 {
            return Err(EngineError::ShapeMismatch(format!(
                "logsumexp: expected non-empty vector, got {shape:?}"
            )));
        }
        Ok(self.push(Op::LogSumExp(a), vec![]))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa.len() != 1 || sa != sb {
            return Err(EngineError::ShapeMismatch(format!(
                "dot: expected equal-length vectors, got {sa:?} and {sb:?}"
            )));
        }
        Ok(self.push(Op::Dot(a, b), vec![]))
    }

    /// Euclidean norm of a rank-1 array.
    pub fn norm(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        if self.shape_of(a).len() != 1 {
            return Err(EngineError::ShapeMismatch(format!(
                "norm: expected vector, got {:?}",
                self.shape_of(a)
            )));
        }
        Ok(self.push(Op::Norm(a), vec![]))
    }

    /// Per-row Euclidean norms of a rank-2 array.
    pub fn row_norms(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        let shape = self.shape_of(a);
        if shape.len() != 2 {
            return Err(EngineError::ShapeMismatch(format!(
                "row_norms: expected matrix, got {shape:?}"
            )));
        }
        let rows = shape[0];
        Ok(self.push(Op::RowNorms(a), vec![rows]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(EngineError::ShapeMismatch(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        let shape = self.shape_of(a);
        if shape.len() != 2 {
            return Err(EngineError::ShapeMismatch(format!(
                "transpose: expected matrix, got {shape:?}"
            )));
        }
        let t = vec![shape[1], shape[0]];
        Ok(self.push(Op::Transpose(a), t))
    }

    /// `x @ w` plus a bias row: x is (n, i), w is (i, o), b is (o).
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let sx = self.shape_of(x);
        let sw = self.shape_of(w);
        let sb = self.shape_of(b);
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(EngineError::ShapeMismatch(format!(
                "affine: incompatible shapes x={sx:?} w={sw:?} b={sb:?}"
            )));
        }
        let shape = vec![sx[0], sw[1]];
        Ok(self.push(Op::Affine { x, w, b }, shape))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId, EngineError> {
        let shape = self.shape_of(a);
        if shape.len() != 2 || i >= shape[0] {
            return Err(EngineError::ShapeMismatch(format!(
                "row: index {i} invalid for shape {shape:?}"
            )));
        }
        let cols = shape[1];
        Ok(self.push(Op::Row(a, i), vec![cols]))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId, EngineError> {
        let shape = self.shape_of(a);
        if shape.len() != 1 || i >= shape[0] {
            return Err(EngineError::ShapeMismatch(format!(
                "index: position {i} invalid for shape {shape:?}"
            )));
        }
        Ok(self.push(Op::Index(a, i), vec![]))
    }

    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId, EngineError> {
        let shape = self.shape_of(a);
        if shape.len() != 1 {
            return Err(EngineError::ShapeMismatch(format!(
                "gather: expected vector, got {shape:?}"
            )));
        }
        if indices.is_empty() {
            return Err(EngineError::EmptyInput("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(EngineError::ShapeMismatch(format!(
                "gather: index {bad} out of bounds for length {}",
                shape[0]
            )));
        }
        let k = indices.len();
        Ok(self.push(Op::Gather(a, indices), vec![k]))
    }

    /// Stack scalar nodes into a vector.
    pub fn pack(&mut self, ids: &[NodeId]) -> Result<NodeId, EngineError> {
        if ids.is_empty() {
            return Err(EngineError::EmptyInput("pack with no inputs".into()));
        }
        for &id in ids {
            if !self.shape_of(id).is_empty() {
                return Err(EngineError::ShapeMismatch(format!(
                    "pack: expected scalars, got shape {:?}",
                    self.shape_of(id)
                )));
            }
        }
        let k = ids.len();
        Ok(self.push(Op::Pack(ids.to_vec()), vec![k]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, EngineError> {
        let old: usize = self.shape_of(a).iter().product();
        let new: usize = shape.iter().product();
        if old != new {
            return Err(EngineError::ShapeMismatch(format!(
                "reshape: {:?} ({} elements) cannot become {:?} ({} elements)",
                self.shape_of(a),
                old,
                shape,
                new
            )));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Cosine similarity of two vectors with the shared denominator floor.
    pub fn cosine(&mut self, u: NodeId, v: NodeId) -> Result<NodeId, EngineError> {
        let num = self.dot(u, v)?;
        let nu = self.norm(u)?;
        let nv = self.norm(v)?;
        let prod = self.mul(nu, nv)?;
        let denom = self.clamp_min(prod, COSINE_EPS);
        self.div(num, denom)
    }

    /// Pairwise cosine similarities: a is (n, d), b is (m, d), result (n, m).
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let (n, m) = (self.shape_of(a)[0], self.shape_of(b)[0]);
        let bt = self.transpose(b)?;
        let raw = self.matmul(a, bt)?;
        let ra = self.row_norms(a)?;
        let rb = self.row_norms(b)?;
        let ra_col = self.reshape(ra, &[n, 1])?;
        let rb_row = self.reshape(rb, &[1, m])?;
        let outer = self.matmul(ra_col, rb_row)?;
        let denom = self.clamp_min(outer, COSINE_EPS);
        self.div(raw, denom)
    }

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if mask[id.0] {
                continue;
            }
            mask[id.0] = true;
            stack.extend(self.nodes[id.0].op.inputs());
        }
        mask
    }

    fn eval_values(
        &self,
        root: NodeId,
        bindings: &Bindings,
    ) -> Result<(Vec<bool>, Vec<Option<Array>>), EngineError> {
        let mask = self.ancestors(root);
        let mut values: Vec<Option<Array>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let value = self.forward(node, &values, bindings)?;
            value.check_finite(node.op.name())?;
            values[i] = Some(value);
        }
        Ok((mask, values))
    }

    /// Value of `root` under the given leaf bindings. Deterministic: identical
    /// bindings produce bit-identical output.
    pub fn evaluate(&self, root: NodeId, bindings: &Bindings) -> Result<Array, EngineError> {
        let (_, mut values) = self.eval_values(root, bindings)?;
        Ok(values[root.0].take().expect("root evaluated"))
    }

    fn forward(
        &self,
        node: &Node,
        values: &[Option<Array>],
        bindings: &Bindings,
    ) -> Result<Array, EngineError> {
        let val = |id: NodeId| values[id.0].as_ref().expect("input evaluated before use");
        let out = match &node.op {
            Op::Leaf { name, .. } => {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| EngineError::UnboundLeaf(name.clone()))?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(EngineError::ShapeMismatch(format!(
                        "leaf '{name}' declared {:?} but bound to {:?}",
                        node.shape,
                        bound.shape()
                    )));
                }
                bound.clone()
            }
            Op::Const(v) => v.clone(),
            Op::Add(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x + y),
            Op::Sub(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x - y),
            Op::Mul(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x * y),
            Op::Div(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x / y),
            Op::Exp(a) => map(val(*a), f64::exp),
            Op::Log(a) => map(val(*a), f64::ln),
            Op::Sqrt(a) => map(val(*a), f64::sqrt),
            Op::Relu(a) => map(val(*a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::ClampMin(a, c) => {
                let floor = *c;
                map(val(*a), move |x| if x > floor { x } else { floor })
            }
            Op::Sum(a) => Array::scalar(val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let v = val(*a);
                Array::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
            }
            Op::Softmax(a, axis) => softmax_forward(val(*a), *axis),
            Op::LogSumExp(a) => Array::scalar(logsumexp_slice(val(*a).data())),
            Op::Dot(a, b) => Array::scalar(
                val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| x * y)
                    .sum(),
            ),
            Op::Norm(a) => Array::scalar(norm_slice(val(*a).data())),
            Op::RowNorms(a) => {
                let v = val(*a);
                let rows = v.shape()[0];
                let out: Vec<f64> = (0..rows).map(|i| norm_slice(v.row(i))).collect();
                Array::from_vec(out)
            }
            Op::MatMul(a, b) => matmul_forward(val(*a), val(*b)),
            Op::Transpose(a) => transpose_forward(val(*a)),
            Op::Affine { x, w, b } => affine_forward(val(*x), val(*w), val(*b)),
            Op::Row(a, i) => Array::from_vec(val(*a).row(*i).to_vec()),
            Op::Index(a, i) => Array::scalar(val(*a).data()[*i]),
            Op::Gather(a, idxs) => {
                let v = val(*a);
                Array::from_vec(idxs.iter().map(|&i| v.data()[i]).collect())
            }
            Op::Pack(ids) => {
                Array::from_vec(ids.iter().map(|&id| val(id).data()[0]).collect())
            }
            Op::Reshape(a) => {
                let mut v = val(*a).clone();
                v = Array::new(node.shape.clone(), v.data().to_vec())
                    .expect("reshape length checked at build");
                v
            }
        };
        debug_assert_eq!(out.shape(), node.shape.as_slice(), "{}", node.op.name());
        Ok(out)
    }

    /// Reverse-mode gradient of a scalar `root` with respect to the named
    /// differentiable leaves. Leaves that do not influence the root get zeros.
    pub fn gradient(
        &self,
        root: NodeId,
        bindings: &Bindings,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Array>, EngineError> {
        if !self.shape_of(root).is_empty() {
            return Err(EngineError::NonScalarRoot(format!(
                "{:?}",
                self.shape_of(root)
            )));
        }
        for &name in wrt {
            let id = self
                .leaves
                .get(name)
                .ok_or_else(|| EngineError::UnknownLeaf(name.to_string()))?;
            if let Op::Leaf { differentiable: false, .. } = self.nodes[id.0].op {
                return Err(EngineError::ConstantLeaf(name.to_string()));
            }
        }

        let (mask, values) = self.eval_values(root, bindings)?;
        let mut adjoints: Vec<Option<Array>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(Array::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !mask[i] {
                continue;
            }
            let grad = match adjoints[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward(i, &grad, &values, &mut adjoints)?;
            adjoints[i] = Some(grad);
        }

        let mut result = BTreeMap::new();
        for &name in wrt {
            let id = self.leaves[name];
            let grad = adjoints[id.0]
                .take()
                .unwrap_or_else(|| Array::zeros(&self.nodes[id.0].shape));
            grad.check_finite("gradient")?;
            result.insert(name.to_string(), grad);
        }
        Ok(result)
    }

    fn backward(
        &self,
        i: usize,
        grad: &Array,
        values: &[Option<Array>],
        adjoints: &mut Vec<Option<Array>>,
    ) -> Result<(), EngineError> {
        let val = |id: NodeId| values[id.0].as_ref().expect("value cached");
        let mut accum = |id: NodeId, contrib: Array| {
            match &mut adjoints[id.0] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            };
        };

        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Const(_) => {}
            Op::Add(a, b) => {
                accum(*a, reduce_to(grad, val(*a).shape(), 1.0));
                accum(*b, reduce_to(grad, val(*b).shape(), 1.0));
            }
            Op::Sub(a, b) => {
                accum(*a, reduce_to(grad, val(*a).shape(), 1.0));
                accum(*b, reduce_to(grad, val(*b).shape(), -1.0));
            }
            Op::Mul(a, b) => {
                let ga = broadcast_zip(grad, val(*b), |g, y| g * y);
                let gb = broadcast_zip(grad, val(*a), |g, x| g * x);
                accum(*a, reduce_to(&ga, val(*a).shape(), 1.0));
                accum(*b, reduce_to(&gb, val(*b).shape(), 1.0));
            }
            Op::Div(a, b) => {
                let ga = broadcast_zip(grad, val(*b), |g, y| g / y);
                let gb_full = {
                    let quot = broadcast_zip(val(*a), val(*b), |x, y| -x / (y * y));
                    broadcast_zip(grad, &quot, |g, q| g * q)
                };
                accum(*a, reduce_to(&ga, val(*a).shape(), 1.0));
                accum(*b, reduce_to(&gb_full, val(*b).shape(), 1.0));
            }
            Op::Exp(a) => {
                let out = map(val(*a), f64::exp);
                accum(*a, zip(grad, &out, |g, y| g * y));
            }
            Op::Log(a) => accum(*a, zip(grad, val(*a), |g, x| g / x)),
            Op::Sqrt(a) => {
                let out = map(val(*a), f64::sqrt);
                accum(*a, zip(grad, &out, |g, y| g * 0.5 / y));
            }
            Op::Relu(a) => accum(*a, zip(grad, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::ClampMin(a, c) => {
                let floor = *c;
                accum(*a, zip(grad, val(*a), |g, x| if x > floor { g } else { 0.0 }));
            }
            Op::Sum(a) => {
                let g = grad.data()[0];
                let mut out = Array::zeros(val(*a).shape());
                out.data_mut().fill(g);
                accum(*a, out);
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                let g = grad.data()[0] / n;
                let mut out = Array::zeros(val(*a).shape());
                out.data_mut().fill(g);
                accum(*a, out);
            }
            Op::Softmax(a, axis) => {
                let y = softmax_forward(val(*a), *axis);
                accum(*a, softmax_backward(&y, grad, *axis));
            }
            Op::LogSumExp(a) => {
                let y = softmax_forward(val(*a), 0);
                let g = grad.data()[0];
                accum(*a, map(&y, |p| g * p));
            }
            Op::Dot(a, b) => {
                let g = grad.data()[0];
                accum(*a, map(val(*b), |y| g * y));
                accum(*b, map(val(*a), |x| g * x));
            }
            Op::Norm(a) => {
                let n = norm_slice(val(*a).data());
                let g = grad.data()[0];
                let scale = if n > 0.0 { g / n } else { 0.0 };
                accum(*a, map(val(*a), |x| scale * x));
            }
            Op::RowNorms(a) => {
                let v = val(*a);
                let rows = v.shape()[0];
                let cols = v.shape()[1];
                let mut out = Array::zeros(v.shape());
                for r in 0..rows {
                    let n = norm_slice(v.row(r));
                    let scale = if n > 0.0 { grad.data()[r] / n } else { 0.0 };
                    for c in 0..cols {
                        out.data_mut()[r * cols + c] = scale * v.at2(r, c);
                    }
                }
                accum(*a, out);
            }
            Op::MatMul(a, b) => {
                let a_val = val(*a);
                let b_val = val(*b);
                accum(*a, matmul_nt(grad, b_val));
                accum(*b, matmul_tn(a_val, grad));
            }
            Op::Transpose(a) => accum(*a, transpose_forward(grad)),
            Op::Affine { x, w, b } => {
                let x_val = val(*x);
                let w_val = val(*w);
                accum(*x, matmul_nt(grad, w_val));
                accum(*w, matmul_tn(x_val, grad));
                let (n, o) = (grad.shape()[0], grad.shape()[1]);
                let mut gb = Array::zeros(&[o]);
                for r in 0..n {
                    for c in 0..o {
                        gb.data_mut()[c] += grad.at2(r, c);
                    }
                }
                accum(*b, gb);
            }
            Op::Row(a, idx) => {
                let v = val(*a);
                let cols = v.shape()[1];
                let mut out = Array::zeros(v.shape());
                out.data_mut()[idx * cols..(idx + 1) * cols].copy_from_slice(grad.data());
                accum(*a, out);
            }
            Op::Index(a, idx) => {
                let mut out = Array::zeros(val(*a).shape());
                out.data_mut()[*idx] = grad.data()[0];
                accum(*a, out);
            }
            Op::Gather(a, idxs) => {
                let mut out = Array::zeros(val(*a).shape());
                for (slot, &src) in idxs.iter().enumerate() {
                    out.data_mut()[src] += grad.data()[slot];
                }
                accum(*a, out);
            }
            Op::Pack(ids) => {
                for (slot, &id) in ids.iter().enumerate() {
                    accum(id, Array::scalar(grad.data()[slot]));
                }
            }
            Op::Reshape(a) => {
                let shaped = Array::new(val(*a).shape().to_vec(), grad.data().to_vec())
                    .expect("reshape gradient length matches");
                accum(*a, shaped);
            }
        }
        Ok(())
    }

    /// Central-difference gradient estimate: (f(x+h) - f(x-h)) / 2h per
    /// coordinate. Leaves marked constant report zeros by convention.
    pub fn numeric_gradient(
        &self,
        root: NodeId,
        bindings: &Bindings,
        wrt: &[&str],
        step: f64,
    ) -> Result<BTreeMap<String, Array>, EngineError> {
        if !(step > 0.0) {
            return Err(EngineError::InvalidStep(step));
        }
        if !self.shape_of(root).is_empty() {
            return Err(EngineError::NonScalarRoot(format!(
                "{:?}",
                self.shape_of(root)
            )));
        }
        let mut result = BTreeMap::new();
        let mut work = bindings.clone();
        for &name in wrt {
            let id = self
                .leaves
                .get(name)
                .copied()
                .ok_or_else(|| EngineError::UnknownLeaf(name.to_string()))?;
            let differentiable = matches!(
                self.nodes[id.0].op,
                Op::Leaf { differentiable: true, .. }
            );
            let base = bindings
                .get(name)
                .ok_or_else(|| EngineError::UnboundLeaf(name.to_string()))?
                .clone();
            if !differentiable {
                result.insert(name.to_string(), Array::zeros(base.shape()));
                continue;
            }
            let mut grad = Array::zeros(base.shape());
            for coord in 0..base.len() {
                let orig = base.data()[coord];
                work.get_mut(name).unwrap().data_mut()[coord] = orig + step;
                let plus = self.evaluate(root, &work)?.item()?;
                work.get_mut(name).unwrap().data_mut()[coord] = orig - step;
                let minus = self.evaluate(root, &work)?.item()?;
                work.get_mut(name).unwrap().data_mut()[coord] = orig;
                grad.data_mut()[coord] = (plus - minus) / (2.0 * step);
            }
            result.insert(name.to_string(), grad);
        }
        Ok(result)
    }
}

// Builds without the finite check; evaluate() screens every node output and
// reports the offending op by name.
fn raw(shape: Vec<usize>, data: Vec<f64>) -> Array {
    let mut out = Array::zeros(&shape);
    out.data_mut().copy_from_slice(&data);
    out
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    raw(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    raw(a.shape().to_vec(), data)
}

/// Elementwise combine with rank-0 broadcast on either side.
fn broadcast_zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if a.shape() == b.shape() {
        zip(a, b, f)
    } else if a.is_scalar() {
        let x = a.data()[0];
        let data: Vec<f64> = b.data().iter().map(|&y| f(x, y)).collect();
        raw(b.shape().to_vec(), data)
    } else {
        let y = b.data()[0];
        let data: Vec<f64> = a.data().iter().map(|&x| f(x, y)).collect();
        raw(a.shape().to_vec(), data)
    }
}

/// Sum a gradient down to `target` shape (identity, or total for a scalar
/// input that was broadcast), scaled by `sign`.
fn reduce_to(grad: &Array, target: &[usize], sign: f64) -> Array {
    if grad.shape() == target {
        if sign == 1.0 {
            grad.clone()
        } else {
            map(grad, |g| sign * g)
        }
    } else {
        debug_assert!(target.is_empty());
        Array::scalar(sign * grad.data().iter().sum::<f64>())
    }
}

fn norm_slice(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn logsumexp_slice(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softmax_forward(a: &Array, axis: usize) -> Array {
    let mut out = Array::zeros(a.shape());
    match a.rank() {
        1 => softmax_slice(a.data(), out.data_mut()),
        2 => {
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            if axis == 1 {
                for r in 0..rows {
                    let mut slice = vec![0.0; cols];
                    softmax_slice(a.row(r), &mut slice);
                    out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&slice);
                }
            } else {
                for c in 0..cols {
                    let col: Vec<f64> = (0..rows).map(|r| a.at2(r, c)).collect();
                    let mut slice = vec![0.0; rows];
                    softmax_slice(&col, &mut slice);
                    for r in 0..rows {
                        out.data_mut()[r * cols + c] = slice[r];
                    }
                }
            }
        }
        _ => unreachable!("softmax shape checked at build"),
    }
    out
}

fn softmax_backward(y: &Array, grad: &Array, axis: usize) -> Array {
    let mut out = Array::zeros(y.shape());
    let jvp = |ys: &[f64], gs: &[f64], os: &mut [f64]| {
        let inner: f64 = ys.iter().zip(gs).map(|(&p, &g)| p * g).sum();
        for ((o, &p), &g) in os.iter_mut().zip(ys).zip(gs) {
            *o = p * (g - inner);
        }
    };
    match y.rank() {
        1 => jvp(y.data(), grad.data(), out.data_mut()),
        2 => {
            let (rows, cols) = (y.shape()[0], y.shape()[1]);
            if axis == 1 {
                for r in 0..rows {
                    let mut slice = vec![0.0; cols];
                    jvp(y.row(r), grad.row(r), &mut slice);
                    out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&slice);
                }
            } else {
                for c in 0..cols {
                    let ys: Vec<f64> = (0..rows).map(|r| y.at2(r, c)).collect();
                    let gs: Vec<f64> = (0..rows).map(|r| grad.at2(r, c)).collect();
                    let mut slice = vec![0.0; rows];
                    jvp(&ys, &gs, &mut slice);
                    for r in 0..rows {
                        out.data_mut()[r * cols + c] = slice[r];
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

fn matmul_forward(a: &Array, b: &Array) -> Array {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = Array::zeros(&[n, m]);
    for i in 0..n {
        for p in 0..k {
            let aip = a.at2(i, p);
            if aip == 0.0 {
                continue;
            }
            let row = &b.data()[p * m..(p + 1) * m];
            let dst = &mut out.data_mut()[i * m..(i + 1) * m];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d += aip * bv;
            }
        }
    }
    out
}

/// grad @ b^T without materializing the transpose.
fn matmul_nt(grad: &Array, b: &Array) -> Array {
    let (n, m) = (grad.shape()[0], grad.shape()[1]);
    let k = b.shape()[0];
    let mut out = Array::zeros(&[n, k]);
    for i in 0..n {
        for p in 0..k {
            let row = &b.data()[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for (g, &bv) in grad.row(i).iter().zip(row) {
                acc += g * bv;
            }
            out.data_mut()[i * k + p] = acc;
        }
    }
    out
}

/// a^T @ grad without materializing the transpose.
fn matmul_tn(a: &Array, grad: &Array) -> Array {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = grad.shape()[1];
    let mut out = Array::zeros(&[k, m]);
    for i in 0..n {
        for p in 0..k {
            let aip = a.at2(i, p);
            if aip == 0.0 {
                continue;
            }
            let row = grad.row(i);
            let dst = &mut out.data_mut()[p * m..(p + 1) * m];
            for (d, &g) in dst.iter_mut().zip(row) {
                *d += aip * g;
            }
        }
    }
    out
}

fn transpose_forward(a: &Array) -> Array {
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let mut out = Array::zeros(&[m, n]);
    for i in 0..n {
        for j in 0..m {
            out.data_mut()[j * n + i] = a.at2(i, j);
        }
    }
    out
}

fn affine_forward(x: &Array, w: &Array, b: &Array) -> Array {
    let mut out = matmul_forward(x, w);
    let (n, o) = (out.shape()[0], out.shape()[1]);
    for i in 0..n {
        for j in 0..o {
            out.data_mut()[i * o + j] += b.data()[j];
        }
    }
    out
}
