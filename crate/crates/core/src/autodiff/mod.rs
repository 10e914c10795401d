//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs include a tracked
//! tensor. Node ids are assigned in recording order, so every input id of a
//! node is smaller than its own id and [`Tape::backward`] can walk the
//! nodes once, from the loss down to the leaves.
//!
//! Values computed without any tracked input are returned as plain tensors
//! and leave no trace on the tape; they are bit-identical to the tracked
//! results because both paths run the same kernels.

pub mod check;
pub mod ops;

use std::cell::RefCell;

use indexmap::IndexMap;

pub use ops::OpKind;

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeom};
use crate::objective::{self, BceSaved};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tensor};

pub(crate) enum Op<T> {
    Leaf,
    Prim(OpKind),
    Sum,
    /// `[N,K] + [K]`, broadcast over rows.
    AddBias,
    /// `[N,D] * [D]`, broadcast over rows.
    MulRow,
    Conv2d(ConvGeom),
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    MaxPool { argmax: Vec<usize> },
    BceLogits(BceSaved<T>),
    BceProbs(BceSaved<T>),
}

pub(crate) enum Arg<T> {
    Node(NodeId),
    Const(Tensor<T>),
}

struct Node<T> {
    op: Op<T>,
    args: Vec<Arg<T>>,
    value: Tensor<T>,
}

/// Recorded computation graph for one forward/backward pass.
///
/// Confined to one thread (interior mutability through `RefCell`).
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    names: RefCell<IndexMap<String, NodeId>>,
    strict: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), names: RefCell::new(IndexMap::new()), strict: true }
    }

    /// In strict mode (the default) `ln` of a non-positive value is an error
    /// instead of producing `-inf`/`NaN`.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Put a copy of `value` on the tape as an anonymous leaf.
    pub fn leaf(&self, value: &Tensor<T>) -> Tensor<T> {
        let v = value.detach();
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { op: Op::Leaf, args: Vec::new(), value: v.clone() });
        v.with_node(id)
    }

    /// Put a named parameter on the tape. Its gradient is reported under
    /// `name` by [`Gradients::named`].
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Tensor<T> {
        let t = self.leaf(value);
        self.names.borrow_mut().insert(name.to_string(), t.node().unwrap());
        t
    }

    pub fn apply(&self, kind: OpKind, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let value = ops::forward(kind, inputs, self.strict)?;
        Ok(self.record(Op::Prim(kind), inputs, value))
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn unary(&self, kind: OpKind, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(kind, &[x])
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.record(Op::Sum, &[x], Tensor::scalar(s))
    }

    /// Adds a length-`K` vector to every row of an `[N,K]` matrix.
    pub fn add_bias(&self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let k = check_row_broadcast("add_bias", x, bias)?;
        let data = x.data().chunks(k).flat_map(|row| row.iter().zip(bias.data()).map(|(&a, &b)| a + b)).collect();
        Ok(self.record(Op::AddBias, &[x, bias], Tensor::raw(x.shape().to_vec(), data)))
    }

    /// Multiplies every row of an `[N,D]` matrix elementwise by a length-`D`
    /// vector.
    pub fn mul_row(&self, x: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
        let k = check_row_broadcast("mul_row", x, row)?;
        let data = x.data().chunks(k).flat_map(|r| r.iter().zip(row.data()).map(|(&a, &b)| a * b)).collect();
        Ok(self.record(Op::MulRow, &[x, row], Tensor::raw(x.shape().to_vec(), data)))
    }

    /// Records `op` if any input is tracked; otherwise returns `value` as is.
    pub(crate) fn record(&self, op: Op<T>, inputs: &[&Tensor<T>], value: Tensor<T>) -> Tensor<T> {
        if inputs.iter().all(|t| t.node().is_none()) {
            return value;
        }
        let args = inputs
            .iter()
            .map(|t| match t.node() {
                Some(id) => Arg::Node(id),
                None => Arg::Const(t.detach()),
            })
            .collect();
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        debug_assert!(inputs.iter().filter_map(|t| t.node()).all(|i| i < id));
        nodes.push(Node { op, args, value: value.clone() });
        value.with_node(id)
    }

    /// Reverse pass from a one-element tracked `loss`.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.len() != 1 {
            return Err(Error::Backward(format!("loss has shape {:?}", loss.shape())));
        }
        let root = loss
            .node()
            .ok_or_else(|| Error::Backward("loss is not on the tape".into()))?;
        let nodes = self.nodes.borrow();
        if root.0 >= nodes.len() {
            return Err(Error::Backward("loss belongs to another tape".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for k in (0..=root.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &nodes[k];
            if !matches!(node.op, Op::Leaf) {
                let vals: Vec<&Tensor<T>> = node
                    .args
                    .iter()
                    .map(|a| match a {
                        Arg::Node(id) => &nodes[id.0].value,
                        Arg::Const(t) => t,
                    })
                    .collect();
                let want: Vec<bool> = node.args.iter().map(|a| matches!(a, Arg::Node(_))).collect();
                let contribs = node_backward(&node.op, &vals, &node.value, &g, &want);
                for (arg, c) in node.args.iter().zip(contribs) {
                    if let (Arg::Node(id), Some(c)) = (arg, c) {
                        accumulate(&mut grads[id.0], c);
                    }
                }
            }
            grads[k] = Some(g);
        }

        Ok(Gradients {
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            names: self.names.borrow().clone(),
        })
    }

    /// Which side of every kink (ReLU sign, max-pool argmax, probability
    /// clamp) the recorded values fall on. Two evaluations with equal
    /// signatures lie in the same differentiable piece.
    pub fn branch_signature(&self) -> Vec<u64> {
        let nodes = self.nodes.borrow();
        let value_of = |a: &Arg<T>| -> Vec<T> {
            match a {
                Arg::Node(id) => nodes[id.0].value.data().to_vec(),
                Arg::Const(t) => t.data().to_vec(),
            }
        };
        let mut sig = Vec::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Prim(OpKind::Relu) => {
                    sig.extend(pack_bits(value_of(&node.args[0]).iter().map(|&x| x > T::zero())));
                }
                Op::MaxPool { argmax } => sig.extend(argmax.iter().map(|&i| i as u64)),
                Op::BceProbs(saved) => sig.extend(pack_bits(saved.clamped.iter().copied())),
                _ => {}
            }
        }
        sig
    }
}

fn pack_bits(bits: impl Iterator<Item = bool>) -> Vec<u64> {
    let mut out = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 64 == 0 {
            out.push(0);
        }
        if b {
            *out.last_mut().unwrap() |= 1 << (i % 64);
        }
    }
    out
}

fn check_row_broadcast<T: Scalar>(op: &'static str, x: &Tensor<T>, v: &Tensor<T>) -> Result<usize> {
    if x.rank() != 2 || v.rank() != 1 || x.shape()[1] != v.shape()[0] {
        return Err(Error::shape(op, format!("{:?} with row vector {:?}", x.shape(), v.shape())));
    }
    Ok(x.shape()[1])
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, c: Vec<T>) {
    match slot {
        None => *slot = Some(c),
        Some(acc) => acc.iter_mut().zip(c).for_each(|(a, c)| *a = *a + c),
    }
}

fn node_backward<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &[T],
    want: &[bool],
) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Prim(kind) => ops::backward(*kind, inputs, out, g).into_iter().map(Some).collect(),
        Op::Sum => vec![Some(vec![g[0]; inputs[0].len()])],
        Op::AddBias => {
            let k = inputs[1].len();
            let mut gb = vec![T::zero(); k];
            for row in g.chunks(k) {
                gb.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
            }
            vec![Some(g.to_vec()), Some(gb)]
        }
        Op::MulRow => {
            let (x, row) = (inputs[0].data(), inputs[1].data());
            let k = row.len();
            let gx = g.chunks(k).flat_map(|gr| gr.iter().zip(row).map(|(&g, &r)| g * r)).collect();
            let mut gr = vec![T::zero(); k];
            for (grow, xrow) in g.chunks(k).zip(x.chunks(k)) {
                for j in 0..k {
                    gr[j] = gr[j] + grow[j] * xrow[j];
                }
            }
            vec![Some(gx), Some(gr)]
        }
        Op::Conv2d(geom) => nn::conv2d_backward(geom, inputs[0], inputs[1], g, want),
        Op::BatchNorm { xhat, inv_std, train } => {
            nn::batchnorm_backward(inputs[0].shape(), inputs[1].data(), xhat, inv_std, *train, g)
        }
        Op::MaxPool { argmax } => vec![Some(nn::max_pool_backward(inputs[0].len(), argmax, g))],
        Op::BceLogits(saved) => vec![Some(objective::bce_logits_backward(inputs[0].data(), saved, g[0]))],
        Op::BceProbs(saved) => vec![Some(objective::bce_probs_backward(inputs[0].data(), saved, g[0]))],
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    names: IndexMap<String, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a tensor on the tape; zeros if the loss does not depend
    /// on it, `None` if it was never on the tape.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        t.node().and_then(|id| self.by_id(id))
    }

    fn by_id(&self, id: NodeId) -> Option<Tensor<T>> {
        let shape = self.shapes.get(id.0)?.clone();
        Some(match &self.grads[id.0] {
            Some(g) => Tensor::raw(shape, g.clone()),
            None => Tensor::zeros(shape),
        })
    }

    pub fn named(&self, name: &str) -> Option<Tensor<T>> {
        self.names.get(name).and_then(|&id| self.by_id(id))
    }

    /// Gradients of every named parameter, in registration order.
    pub fn by_name(&self) -> IndexMap<String, Tensor<T>> {
        self.names
            .iter()
            .map(|(n, &id)| (n.clone(), self.by_id(id).expect("registered node")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.param("x", &t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = tape.sum(&x);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.named("x").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, -2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let g = tape.backward(&tape.sum(&sq)).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn unused_parameter_gets_zeros() {
        let tape = Tape::new();
        let x = tape.param("x", &t(&[2], &[1.0, 2.0]));
        let _u = tape.param("unused", &t(&[3], &[1.0, 2.0, 3.0]));
        let g = tape.backward(&tape.sum(&x)).unwrap();
        assert_eq!(g.named("unused").unwrap().data(), &[0.0; 3]);
        assert_eq!(g.by_name().len(), 2);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::Backward(_))));
        let free = Tensor::<f64>::scalar(1.0);
        assert!(matches!(tape.backward(&free), Err(Error::Backward(_))));
    }

    #[test]
    fn untracked_inputs_leave_no_trace() {
        let tape = Tape::<f64>::new();
        let a = t(&[2], &[0.3, -0.7]);
        let y = tape.apply(OpKind::Sigmoid, &[&a]).unwrap();
        assert!(tape.is_empty());
        assert!(!y.is_tracked());
        let ya = tape.apply(OpKind::Sigmoid, &[&tape.leaf(&a)]).unwrap();
        assert_eq!(y.data(), ya.data());
        assert!(ya.is_tracked());
    }

    #[test]
    fn constants_mixed_with_tracked_inputs() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = t(&[2, 1], &[0.5, -1.0]);
        let y = tape.matmul(&x, &w).unwrap();
        let g = tape.backward(&tape.sum(&y)).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn backward_twice_is_bitwise_stable() {
        let tape = Tape::new();
        let x = tape.param("x", &t(&[3], &[0.1, -0.4, 2.2]));
        let e = tape.unary(OpKind::Exp, &x).unwrap();
        let s = tape.unary(OpKind::Sigmoid, &e).unwrap();
        let loss = tape.sum(&tape.mul(&s, &x).unwrap());
        let a = tape.backward(&loss).unwrap().by_name();
        let b = tape.backward(&loss).unwrap().by_name();
        assert_eq!(a, b);
    }

    #[test]
    fn row_broadcast_ops() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.leaf(&t(&[2], &[10.0, 100.0]));
        let y = tape.mul_row(&x, &r).unwrap();
        assert_eq!(y.data(), &[10.0, 200.0, 30.0, 400.0]);
        let z = tape.add_bias(&y, &r).unwrap();
        assert_eq!(z.data(), &[20.0, 300.0, 40.0, 500.0]);
        let g = tape.backward(&tape.sum(&z)).unwrap();
        assert_eq!(g.wrt(&r).unwrap().data(), &[1.0 + 4.0 + 1.0, 1.0 + 6.0 + 1.0]);
        assert_eq!(g.wrt(&x).unwrap().data(), &[10.0, 100.0, 10.0, 100.0]);
    }
}
