use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule: receives the output gradient and deposits contributions
/// into parent slots through the sink callback.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &mut dyn FnMut(Var, Vec<S>))>;

pub(crate) struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Dynamic computation graph. Nodes are appended in forward order, so the
/// reversed index order is a valid topological order for backpropagation.
pub struct Graph<S: Scalar = f64> {
    pub(crate) nodes: Vec<Node<S>>,
    recording: bool,
    grads: Vec<Option<Vec<S>>>,
    params: BTreeMap<String, Var>,
}

impl<S: Scalar> Graph<S> {
    /// Graph that records backward rules; required before calling `backward`.
    pub fn recording() -> Self {
        Graph { nodes: Vec::new(), recording: true, grads: Vec::new(), params: BTreeMap::new() }
    }

    /// Forward-only graph: no backward rules are stored.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), recording: false, grads: Vec::new(), params: BTreeMap::new() }
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

    /// Leaf that never takes a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("constant", value, false, None)
    }

    /// Leaf that takes a gradient (network inputs under test, probes).
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        let rg = self.recording;
        self.push("input", value, rg, None)
    }

    /// Leaf for a named parameter. Calls with the same name return the same
    /// node so gradient contributions from every use site accumulate.
    /// Frozen parameters never require grad.
    pub fn param(&mut self, p: &Parameter<S>) -> Result<Var> {
        if let Some(&v) = self.params.get(&p.name) {
            return Ok(v);
        }
        let rg = self.recording && !p.frozen;
        let v = self.push("param", p.value.clone(), rg, None)?;
        self.params.insert(p.name.clone(), v);
        Ok(v)
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        requires_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Result<Var> {
        value.check_finite(op)?;
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires_grad, backward });
        Ok(Var(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True when an op fed by `parents` should record a backward rule.
    pub(crate) fn wants_grad(&self, parents: &[Var]) -> bool {
        self.recording && parents.iter().any(|&p| self.nodes[p.0].requires_grad)
    }

    /// Reverse-mode accumulation from a scalar loss. Gradients for every
    /// reachable `requires_grad` node are retained and queryable afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::usage("backward on a non-recording graph"));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let req: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if req[loss.0] {
            grads[loss.0] = Some(vec![S::one()]);
        }

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(bw) = self.nodes[i].backward.as_ref() else { continue };
            // The output gradient stays in place (queryable later); backward
            // deposits into strictly smaller indices, so the split is safe.
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].as_ref().expect("checked above");
            bw(g, &mut |parent: Var, contrib: Vec<S>| {
                debug_assert!(parent.0 < i, "backward edge must point at an earlier node");
                if !req[parent.0] {
                    return;
                }
                match &mut lower[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            });
        }

        for g in grads.iter().flatten() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient buffer accumulated for `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grad(v)?;
        Some(
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.to_vec())
                .expect("grad has value shape"),
        )
    }

    /// Gradients of all trainable parameters touched by this graph, keyed by
    /// name in sorted order. Parameters that received no gradient are absent.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<S>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.grad_tensor(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::recording();
        let x = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut g = Graph::<f64>::recording();
        let x = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::recording();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_inference_graph() {
        let mut g = Graph::<f64>::inference();
        let x = g.input(Tensor::scalar(1.0)).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut g = Graph::<f64>::recording();
        let frozen = Parameter::new("w.frozen", Tensor::full(&[2], 1.0), true);
        let live = Parameter::new("w.live", Tensor::full(&[2], 1.0), false);
        let a = g.param(&frozen).unwrap();
        let b = g.param(&live).unwrap();
        let y = g.mul(a, b).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
        let grads = g.param_grads();
        assert!(grads.contains_key("w.live"));
        assert!(!grads.contains_key("w.frozen"));
    }

    #[test]
    fn reused_param_accumulates_from_both_sites() {
        let mut g = Graph::<f64>::recording();
        let p = Parameter::new("w", Tensor::full(&[1], 3.0), false);
        let a = g.param(&p).unwrap();
        let b = g.param(&p).unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap(); // w^2
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[6.0]); // 2w
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::recording();
        let x = g.input(Tensor::new(vec![1], vec![1.0e308]).unwrap()).unwrap();
        assert!(matches!(g.add(x, x), Err(Error::NonFinite { .. })));
    }
}
