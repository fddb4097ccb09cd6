use super::kernels;
use super::{Scalar, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by the tape. See the kernel module header for
/// the shape rule of each.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Matmul,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    GatherRows(Vec<usize>),
    Mean {
        axis: Option<usize>,
    },
    Sum {
        axis: Option<usize>,
    },
    Exp,
    Log,
    Sqrt,
    Abs,
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    Gelu,
    Softmax,
    LogSoftmax,
    /// `x / max(||x||, 1e-12)` over the last axis.
    L2Normalize,
    /// `(x - mean) / sqrt(var + eps)` over the last axis, biased variance.
    Standardize {
        eps: f64,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Permute(_) => "permute",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Mean { .. } => "mean",
            OpKind::Sum { .. } => "sum",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Standardize { .. } => "standardize",
        }
    }
}

enum Origin {
    Leaf,
    Op { kind: OpKind, inputs: Vec<Var> },
}

struct Node<S> {
    value: Tensor<S>,
    origin: Origin,
    requires_grad: bool,
}

/// Append-only tape. Node inputs always precede the node, so a reverse scan
/// is a valid topological order.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph on which nothing requires a gradient, even parameters.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf that requires a gradient iff the tensor says so.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            origin: Origin::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` if the leaf does
    /// not require one or the root does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> TensorResult<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(v.0))
        }
    }

    /// Evaluates one operation and records it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> TensorResult<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let values: Vec<&Tensor<S>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = kernels::forward(&kind, &values)?;
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let origin = if requires_grad {
            Origin::Op {
                kind,
                inputs: inputs.to_vec(),
            }
        } else {
            Origin::Leaf
        };
        self.nodes.push(Node {
            value: out,
            origin,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar root. Leaf gradients accumulate into the
    /// leaves' gradient slots, so calling this twice sums the two passes.
    pub fn backward(&mut self, root: Var) -> TensorResult<()> {
        self.check(root)?;
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(vec![S::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let node = &self.nodes[id];
            match &node.origin {
                Origin::Leaf => {
                    let value = &mut self.nodes[id].value;
                    let total = match value.grad() {
                        Some(old) => old.iter().zip(&g).map(|(&a, &b)| a + b).collect(),
                        None => g,
                    };
                    value.set_grad(total);
                }
                Origin::Op { kind, inputs } => {
                    let values: Vec<&Tensor<S>> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let grads = kernels::backward(kind, &values, &node.value, &g);
                    for (input, gi) in inputs.iter().zip(grads) {
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        match &mut pending[input.0] {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a = *a + b),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> TensorResult<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.apply(OpKind::Matmul, &[a, b])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> TensorResult<Var> {
        self.apply(OpKind::Permute(perm.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("needs rank >= 2, got {:?}", self.value(a).shape()),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> TensorResult<Var> {
        self.apply(OpKind::GatherRows(indices), &[a])
    }

    pub fn mean(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::Mean { axis: None }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        self.apply(OpKind::Mean { axis: Some(axis) }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::Sum { axis: None }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        self.apply(OpKind::Sum { axis: Some(axis) }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::Sqrt, &[a])
    }

    pub fn abs(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::Abs, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::Gelu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::LogSoftmax, &[a])
    }

    pub fn l2_normalize(&mut self, a: Var) -> TensorResult<Var> {
        self.apply(OpKind::L2Normalize, &[a])
    }

    pub fn standardize(&mut self, a: Var, eps: f64) -> TensorResult<Var> {
        self.apply(OpKind::Standardize { eps }, &[a])
    }
}
