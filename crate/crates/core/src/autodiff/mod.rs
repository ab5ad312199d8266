//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records a closed set of primitives. Every forward value is
//! cached on its node, and [`Tape::backward`] walks the nodes once in
//! reverse, accumulating adjoints in ascending input order so repeated runs
//! are bit-identical.

mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use tensor::{fast_tanh, Tensor};
pub(crate) use tensor::gemm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid tensor shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed primitive set accepted by [`Tape::record`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Matmul,
    /// Elementwise sum; the right operand may be a `1 x cols` row
    /// (broadcast over the batch) or a single element.
    Add,
    Subtract,
    Multiply,
    Tanh,
    Square,
    Scale(f64),
    ReduceSum,
    ReduceMean,
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Subtract => "subtract",
            OpKind::Multiply => "multiply",
            OpKind::Tanh => "tanh",
            OpKind::Square => "square",
            OpKind::Scale(_) => "scale",
            OpKind::ReduceSum => "reduce-sum",
            OpKind::ReduceMean => "reduce-mean",
        }
    }

    fn arity(self) -> usize {
        match self {
            OpKind::Matmul | OpKind::Add | OpKind::Subtract | OpKind::Multiply => 2,
            _ => 1,
        }
    }
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_rule(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast, AutodiffError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 {
        Ok(Broadcast::Scalar)
    } else if a.is_matrix() && b.is_matrix() && b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn broadcast_apply(a: &Tensor, b: &Tensor, rule: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match rule {
        Broadcast::Same => a.zip_map(b, f),
        Broadcast::Scalar => {
            let s = b.values()[0];
            a.map(|x| f(x, s))
        }
        Broadcast::Row => {
            let cols = a.cols();
            let row = b.values();
            let mut out = a.clone();
            for chunk in out.values_mut().chunks_mut(cols) {
                for (x, &r) in chunk.iter_mut().zip(row) {
                    *x = f(*x, r);
                }
            }
            out
        }
    }
}

/// Folds an adjoint shaped like the left operand back onto the right
/// operand's shape.
fn broadcast_reduce(grad: Tensor, b_shape: &[usize], rule: Broadcast) -> Tensor {
    match rule {
        Broadcast::Same => grad,
        Broadcast::Scalar => {
            let total: f64 = grad.values().iter().sum();
            Tensor::full(b_shape, total)
        }
        Broadcast::Row => {
            let cols = grad.cols();
            let mut acc = vec![0.0; cols];
            for chunk in grad.values().chunks(cols) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            Tensor::new(b_shape.to_vec(), acc).expect("row shape")
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Subtract(NodeId, NodeId, Broadcast),
    Multiply(NodeId, NodeId, Broadcast),
    Tanh(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    ReduceSum(NodeId),
    ReduceMean(NodeId),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Matmul(a, b)
            | Op::Add(a, b, _)
            | Op::Subtract(a, b, _)
            | Op::Multiply(a, b, _) => [Some(a), Some(b)],
            Op::Tanh(a) | Op::Square(a) | Op::Scale(a, _) | Op::ReduceSum(a) | Op::ReduceMean(a) => {
                [Some(a), None]
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
    /// A trainable leaf is reachable upstream of this node.
    needs_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input. Constants never receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.push_leaf(value, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Result<NodeId, AutodiffError> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: id.0,
                op: "leaf",
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable,
            needs_grad: trainable,
        });
        Ok(id)
    }

    /// Panics on an id from another tape; see [`Tape::try_value`].
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor, AutodiffError> {
        self.get(id)
    }

    /// The id of the `index`-th recorded node.
    pub fn node(&self, index: usize) -> Result<NodeId, AutodiffError> {
        if index < self.nodes.len() {
            Ok(NodeId(index))
        } else {
            Err(AutodiffError::UnknownNode(index))
        }
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Ids of all trainable leaves, in recording order.
    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn get(&self, id: NodeId) -> Result<&Tensor, AutodiffError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownNode(id.0))
    }

    /// Records one primitive applied to nodes already on the tape and caches
    /// its forward value.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let name = kind.name();
        if inputs.len() != kind.arity() {
            return Err(AutodiffError::Arity {
                op: name,
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let a = self.get(inputs[0])?;
        let (op, value) = match kind {
            OpKind::Matmul => {
                let b = self.get(inputs[1])?;
                if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let out = Tensor::matrix(a.rows(), b.cols(), gemm(a, false, b, false));
                (Op::Matmul(inputs[0], inputs[1]), out)
            }
            OpKind::Add | OpKind::Subtract | OpKind::Multiply => {
                let b = self.get(inputs[1])?;
                let rule = broadcast_rule(name, a, b)?;
                let (x, y) = (inputs[0], inputs[1]);
                match kind {
                    OpKind::Add => (Op::Add(x, y, rule), broadcast_apply(a, b, rule, |p, q| p + q)),
                    OpKind::Subtract => {
                        (Op::Subtract(x, y, rule), broadcast_apply(a, b, rule, |p, q| p - q))
                    }
                    _ => (Op::Multiply(x, y, rule), broadcast_apply(a, b, rule, |p, q| p * q)),
                }
            }
            OpKind::Tanh => (Op::Tanh(inputs[0]), a.map(tensor::fast_tanh)),
            OpKind::Square => (Op::Square(inputs[0]), a.map(|x| x * x)),
            OpKind::Scale(s) => (Op::Scale(inputs[0], s), a.map(|x| s * x)),
            OpKind::ReduceSum => (
                Op::ReduceSum(inputs[0]),
                Tensor::scalar(a.values().iter().sum()),
            ),
            OpKind::ReduceMean => (
                Op::ReduceMean(inputs[0]),
                Tensor::scalar(a.values().iter().sum::<f64>() / a.len() as f64),
            ),
        };
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { node: id.0, op: name });
        }
        let needs_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            needs_grad,
        });
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Multiply, &[a, b])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Square, &[a])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Scale(s), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::ReduceSum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::ReduceMean, &[a])
    }

    /// Gradient of a scalar `root` with respect to every trainable leaf.
    ///
    /// Leaves that do not influence `root` get zero tensors of their own
    /// shape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AutodiffError> {
        let root_value = self.get(root)?;
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].needs_grad {
            adjoints[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                adjoints[idx] = Some(grad);
                continue;
            }
            for (input, contribution) in self.local_grads(node, grad) {
                match &mut adjoints[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.trainable {
                continue;
            }
            let g = adjoints
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            grads.insert(NodeId(i), g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node, restricted to inputs that lead
    /// back to a trainable leaf. Inputs are emitted in ascending operand order.
    fn local_grads(&self, node: &Node, grad: Tensor) -> Vec<(NodeId, Tensor)> {
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut out = Vec::with_capacity(2);
        match node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if wants(a) {
                    let (av, bv) = (val(a), val(b));
                    let g = Tensor::new(av.shape().to_vec(), gemm(&grad, false, bv, true))
                        .expect("matmul lhs grad shape");
                    out.push((a, g));
                }
                if wants(b) {
                    let (av, bv) = (val(a), val(b));
                    let g = Tensor::new(bv.shape().to_vec(), gemm(av, true, &grad, false))
                        .expect("matmul rhs grad shape");
                    out.push((b, g));
                }
            }
            Op::Add(a, b, rule) => {
                if wants(a) {
                    out.push((a, grad.clone()));
                }
                if wants(b) {
                    out.push((b, broadcast_reduce(grad, val(b).shape(), rule)));
                }
            }
            Op::Subtract(a, b, rule) => {
                if wants(a) {
                    out.push((a, grad.clone()));
                }
                if wants(b) {
                    out.push((b, broadcast_reduce(grad.map(|g| -g), val(b).shape(), rule)));
                }
            }
            Op::Multiply(a, b, rule) => {
                if wants(a) {
                    out.push((a, broadcast_apply(&grad, val(b), rule, |g, y| g * y)));
                }
                if wants(b) {
                    let prod = grad.zip_map(val(a), |g, x| g * x);
                    out.push((b, broadcast_reduce(prod, val(b).shape(), rule)));
                }
            }
            Op::Tanh(a) => {
                if wants(a) {
                    out.push((a, grad.zip_map(&node.value, |g, y| g * (1.0 - y * y))));
                }
            }
            Op::Square(a) => {
                if wants(a) {
                    out.push((a, grad.zip_map(val(a), |g, x| 2.0 * g * x)));
                }
            }
            Op::Scale(a, s) => {
                if wants(a) {
                    out.push((a, grad.map(|g| s * g)));
                }
            }
            Op::ReduceSum(a) => {
                if wants(a) {
                    out.push((a, Tensor::full(val(a).shape(), grad.values()[0])));
                }
            }
            Op::ReduceMean(a) => {
                if wants(a) {
                    let n = val(a).len() as f64;
                    out.push((a, Tensor::full(val(a).shape(), grad.values()[0] / n)));
                }
            }
        }
        out
    }
}

/// Gradients of a scalar root, keyed by trainable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_values(n: usize, seed: u64) -> Vec<f64> {
        // small LCG, good enough for test inputs in [-2, 2]
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn tanh_of_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).item(), Some(0.0));
    }

    #[test]
    fn matmul_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6])).unwrap();
        let b = tape.constant(Tensor::matrix(3, 1, vec![1.0; 3])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).values(), &[3.0, 3.0]);
    }

    #[test]
    fn reduce_mean_vector() {
        let mut tape = Tape::new();
        let v = tape
            .constant(Tensor::new(vec![3], vec![2.0, 4.0, 6.0]).unwrap())
            .unwrap();
        let m = tape.mean(v).unwrap();
        assert_eq!(tape.value(m).item(), Some(4.0));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6])).unwrap();
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = tape.constant(Tensor::matrix(3, 2, vec![0.0; 6])).unwrap();
        assert!(matches!(
            tape.add(a, c),
            Err(AutodiffError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn non_finite_is_rejected_with_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e200)).unwrap();
        let err = tape.square(a).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { node: 1, op: "square" });
        assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn unreachable_leaves_get_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 2, vec![1.0; 4])).unwrap();
        let c = tape.constant(Tensor::matrix(2, 2, vec![5.0; 4])).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 2, vec![1.0; 4])).unwrap();
        assert_eq!(
            tape.backward(w).unwrap_err(),
            AutodiffError::NonScalarRoot(vec![2, 2])
        );
    }

    #[test]
    fn broadcast_row_and_scalar_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 2, rng_values(6, 1))).unwrap();
        let b = tape.param(Tensor::matrix(1, 2, vec![0.5, -0.25])).unwrap();
        let s = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.add(x, b).unwrap();
        let z = tape.mul(y, s).unwrap();
        let root = tape.sum(z).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(b).unwrap().values(), &[6.0, 6.0]);
        let expected_s: f64 = tape.value(y).values().iter().sum();
        assert!((g.get(s).unwrap().item().unwrap() - expected_s).abs() < 1e-12);
    }

    #[test]
    fn record_rejects_wrong_arity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.record(OpKind::Add, &[a]),
            Err(AutodiffError::Arity { .. })
        ));
        assert!(matches!(
            tape.record(OpKind::Tanh, &[NodeId(7)]),
            Err(AutodiffError::UnknownNode(7))
        ));
    }
}
