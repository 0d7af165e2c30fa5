use std::collections::BTreeMap;

use crate::ops::{activation, conv, custom, elementwise, loss, matmul, norm, pool, shape, softmax};
use crate::{Element, ParamId, ParameterStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Recorded operation together with whatever its backward pass needs.
pub(crate) enum Op<T> {
    Leaf,
    Conv2d(conv::ConvNode),
    Pool2d(pool::PoolNode),
    Activation(activation::ActivationNode),
    Softmax(softmax::SoftmaxNode),
    LayerNorm(norm::LayerNormNode<T>),
    BatchNorm(norm::BatchNormNode<T>),
    Matmul(matmul::MatmulNode),
    Linear(matmul::LinearNode),
    Binary(elementwise::BinaryNode),
    Scale(elementwise::ScaleNode<T>),
    Reduce(elementwise::ReduceNode),
    SpatialMean(elementwise::SpatialMeanNode),
    Reshape(shape::ReshapeNode),
    Permute(shape::PermuteNode),
    Concat(shape::ConcatNode),
    Narrow(shape::NarrowNode),
    Gather(shape::GatherNode),
    CrossEntropy(loss::CrossEntropyNode<T>),
    Custom(custom::CustomNode<T>),
}

impl<T: Element> Op<T> {
    fn backward(&self, out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        match self {
            Op::Leaf => Ok(()),
            Op::Conv2d(n) => n.backward(grad, sink),
            Op::Pool2d(n) => n.backward(grad, sink),
            Op::Activation(n) => n.backward(out, grad, sink),
            Op::Softmax(n) => n.backward(out, grad, sink),
            Op::LayerNorm(n) => n.backward(grad, sink),
            Op::BatchNorm(n) => n.backward(grad, sink),
            Op::Matmul(n) => n.backward(grad, sink),
            Op::Linear(n) => n.backward(grad, sink),
            Op::Binary(n) => n.backward(grad, sink),
            Op::Scale(n) => n.backward(grad, sink),
            Op::Reduce(n) => n.backward(grad, sink),
            Op::SpatialMean(n) => n.backward(grad, sink),
            Op::Reshape(n) => n.backward(grad, sink),
            Op::Permute(n) => n.backward(grad, sink),
            Op::Concat(n) => n.backward(grad, sink),
            Op::Narrow(n) => n.backward(grad, sink),
            Op::Gather(n) => n.backward(grad, sink),
            Op::CrossEntropy(n) => n.backward(grad, sink),
            Op::Custom(n) => n.backward(out, grad, sink),
        }
    }
}

/// Gradient accumulation buffers handed to each backward rule.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Element> GradSink<'a, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v`, zero-filled on first use.
    pub fn slot(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Adds `grad` elementwise into the buffer of `v` if it needs one.
    pub fn add(&mut self, v: Var, grad: &[T]) {
        if self.wants(v) {
            for (s, &g) in self.slot(v).iter_mut().zip(grad) {
                *s = *s + g;
            }
        }
    }
}

/// Gradients of every leaf reached by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of each bound leaf onto its parameter's grad slot.
    pub fn accumulate_into(&self, store: &mut ParameterStore<T>, bindings: &[(ParamId, Var)]) -> Result<()> {
        for &(id, var) in bindings {
            if let Some(g) = self.get(var) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

/// Dynamically recorded computation graph.
///
/// Nodes are appended in evaluation order, so inputs always precede the nodes
/// that consume them and a reverse sweep is a valid topological traversal.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    scope: String,
    macs: BTreeMap<String, u64>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scope: String::new(),
            macs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copies `v` into a new constant, cutting the tape at this point.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Label under which subsequent multiply-accumulate counts are recorded.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Multiply-accumulate counts of recorded conv/linear/matmul ops, by scope.
    pub fn mac_counts(&self) -> &BTreeMap<String, u64> {
        &self.macs
    }

    pub(crate) fn count_macs(&mut self, macs: u64) {
        *self.macs.entry(self.scope.clone()).or_insert(0) += macs;
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`, visiting each recorded node once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            node.op.backward(&node.value, &g, &mut sink)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) => Some(
                        Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches leaf shape"),
                    ),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.0));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(d).is_none());
        // only the non-detached factor contributes: d(x·c)/dx = c
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        let c = tape.constant(Tensor::scalar(3.0));
        let l2 = tape.sum(c);
        assert!(tape.backward(l2).unwrap().get(c).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut store = ParameterStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        for round in 1..=2 {
            let mut tape = Tape::new();
            let w = tape.leaf(store.value(id).clone());
            let loss = tape.sum(w);
            let grads = tape.backward(loss).unwrap();
            grads.accumulate_into(&mut store, &[(id, w)]).unwrap();
            assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[round as f64; 2]);
        }
        store.zero_grads();
        assert!(store.get(id).grad.is_none());
    }
}
