//! Reverse traversal of the recorded operation graph.
//!
//! Operations record themselves as they execute: each output tensor keeps
//! references to its inputs and a VJP closure. The tape is the topological
//! ordering of that record, built once per backward call; replaying it in
//! reverse visits every node exactly once.

use std::collections::HashSet;

use super::{Element, Tensor};

/// Ordered record of executed operations (leaves first). Holding the tape
/// keeps the referenced tensors alive until accumulation finishes.
pub struct Tape<E: Element> {
    order: Vec<Tensor<E>>,
}

impl<E: Element> Tape<E> {
    /// Depth-first topological sort of the graph reachable from `root`,
    /// restricted to nodes that participate in gradient flow.
    pub fn build(root: &Tensor<E>) -> Self {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order: (tensor, children_expanded)
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.node.requires_grad || visited.contains(&t.node.id) {
                continue;
            }
            visited.insert(t.node.id);
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                stack.push((p.clone(), false));
            }
        }
        Tape { order }
    }

    /// Number of recorded nodes in gradient flow.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Walk the record root-to-leaves, pushing each node's upstream gradient
    /// through its VJP into the parents (additively).
    pub(crate) fn reverse_accumulate(&self) {
        for t in self.order.iter().rev() {
            let Some(vjp) = &t.node.vjp else { continue };
            let upstream = t.node.grad.borrow().clone();
            let Some(upstream) = upstream else { continue };
            let parent_grads = vjp(&upstream);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (parent, pg) in t.node.parents.iter().zip(parent_grads) {
                if parent.requires_grad() {
                    parent.accumulate_grad(&pg);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_visits_each_node_once() {
        // Diamond: z = (x*x) + (x*x reused). The shared product node must be
        // visited once; its gradient reaching x is 2 * 2x = 4x.
        let x = Tensor::<f64>::param(vec![1], vec![3.0]).unwrap();
        let sq = x.mul(&x).unwrap();
        let z = sq.add(&sq).unwrap().sum();
        let tape = Tape::build(&z);
        // nodes: x, sq, add, sum — each exactly once
        assert_eq!(tape.len(), 4);
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 12.0); // d/dx 2x^2 = 4x = 12
    }

    #[test]
    fn constants_are_excluded_from_the_tape() {
        let x = Tensor::<f64>::param(vec![1], vec![1.0]).unwrap();
        let c = Tensor::<f64>::from_vec(vec![1], vec![5.0]).unwrap();
        let z = x.mul(&c).unwrap().sum();
        let tape = Tape::build(&z);
        assert_eq!(tape.len(), 3); // x, mul, sum — constant c not recorded
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 5.0);
        assert!(c.grad().is_none());
    }
}
