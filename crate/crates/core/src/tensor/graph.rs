use std::collections::HashMap;
use std::rc::Rc;

use super::ops::{self, Op};
use super::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value produced inside a [`Graph`].
///
/// `id` is `None` for values that no gradient can flow through (constants,
/// or anything computed while recording is off). Dropping the last handle
/// to an untracked value frees it, which keeps inference memory flat.
#[derive(Clone)]
pub struct Var<T> {
    pub(crate) id: Option<usize>,
    pub(crate) value: Rc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(self.value.shape().to_vec(), self.value.data().to_vec())
    }
}

impl<T> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape)
            .finish()
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) numel: usize,
}

/// Tape of executed primitive ops.
///
/// Ops are appended in execution order; `backward` walks the tape once in
/// reverse. A graph belongs to a single thread for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    leaf_names: HashMap<String, usize>,
    leaf_grads: HashMap<usize, Vec<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            leaf_names: HashMap::new(),
            leaf_grads: HashMap::new(),
        }
    }

    /// A graph that records nothing. Every value is a constant.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(tensor),
        }
    }

    /// Binds `tensor` as a named leaf. Tensors that do not require a
    /// gradient come back as constants.
    pub fn param(&mut self, name: &str, tensor: &Tensor<T>) -> Var<T> {
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        if !self.recording || !tensor.requires_grad() {
            return self.constant(value);
        }
        let var = self.push(value, true, || Op::Leaf);
        if let Some(id) = var.id {
            self.leaf_names.insert(name.to_string(), id);
        }
        var
    }

    /// Anonymous leaf that always tracks gradients (when recording).
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var<T> {
        self.push(tensor, true, || Op::Leaf)
    }

    /// Binds every tensor of a parameter set; returns the vars keyed by name.
    pub fn bind<P: ParamSet<T> + ?Sized>(&mut self, params: &P) -> HashMap<String, Var<T>> {
        let mut out = HashMap::new();
        params.visit(&mut |name, t| {
            let v = self.param(name, t);
            out.insert(name.to_string(), v);
        });
        out
    }

    pub(crate) fn tracks(&self, vars: &[&Var<T>]) -> bool {
        self.recording && vars.iter().any(|v| v.id.is_some())
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        track: bool,
        op: impl FnOnce() -> Op<T>,
    ) -> Var<T> {
        self.push_shared(Rc::new(value), track, op)
    }

    /// [`Graph::push`] for a value the op also keeps for its backward pass.
    pub(crate) fn push_shared(
        &mut self,
        value: Rc<Tensor<T>>,
        track: bool,
        op: impl FnOnce() -> Op<T>,
    ) -> Var<T> {
        let id = if track && self.recording {
            self.nodes.push(Node {
                op: op(),
                numel: value.numel(),
            });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Var { id, value }
    }

    /// Propagates d(loss)/d(leaf) to every tracked leaf reachable from `loss`.
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: &Var<T>) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let Some(root) = loss.id else {
            return Ok(());
        };
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            debug_assert_eq!(g.len(), node.numel);
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a = *a + *d),
                    None => {
                        self.leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            ops::backward_op(&node.op, &g, &mut grads);
        }
        Ok(())
    }

    pub fn grad(&self, var: &Var<T>) -> Option<&[T]> {
        var.id
            .and_then(|id| self.leaf_grads.get(&id))
            .map(Vec::as_slice)
    }

    pub fn grad_by_name(&self, name: &str) -> Option<&[T]> {
        self.leaf_names
            .get(name)
            .and_then(|id| self.leaf_grads.get(id))
            .map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Adds the accumulated leaf gradients into the matching tensors' grad slots.
    pub fn accumulate_into<P: ParamSet<T> + ?Sized>(&self, params: &mut P) -> Result<()> {
        let mut result = Ok(());
        params.visit_mut(&mut |name, t| {
            if result.is_err() {
                return;
            }
            if let Some(g) = self.grad_by_name(name) {
                result = t.accumulate_grad(g);
            }
        });
        result
    }
}

pub(crate) fn accumulate<T: Real>(
    grads: &mut [Option<Vec<T>>],
    parent: Option<usize>,
    delta: impl FnOnce() -> Vec<T>,
) {
    let Some(p) = parent else { return };
    let d = delta();
    match &mut grads[p] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, v)| *a = *a + *v),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(&x);
        g.backward(&s).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gives_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
        let sq = g.mul(&x, &x).unwrap();
        let s = g.sum(&sq);
        g.backward(&s).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(&x).unwrap(), expected.as_slice());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[3], 2.0));
        let s = g.sum(&x);
        g.backward(&s).unwrap();
        g.backward(&s).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &[2.0; 3]);
        g.zero_grad();
        assert!(g.grad(&x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(&x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::full(&[3], 1.0));
        let y = g.mul(&x, &x).unwrap();
        assert!(!y.is_tracked());
        assert!(g.is_empty());
    }

    #[test]
    fn frozen_param_is_constant() {
        let mut g = Graph::<f64>::new();
        let frozen = Tensor::full(&[2], 1.0);
        let live = Tensor::full(&[2], 1.0).with_requires_grad(true);
        assert!(!g.param("frozen", &frozen).is_tracked());
        assert!(g.param("live", &live).is_tracked());
    }
}
