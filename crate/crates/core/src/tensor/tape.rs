use std::collections::{HashMap, HashSet};

use super::{Result, Tensor, TensorError};

/// Topologically ordered record of the gradient-tracking nodes reachable
/// from a root. Inputs always precede the nodes that consume them.
pub struct GraphTape {
    nodes: Vec<Tensor>,
}

impl GraphTape {
    pub fn record(root: &Tensor) -> Self {
        let mut seen = HashSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            nodes.push(t);
        }
        // ids are handed out at creation, so parents always have smaller ids
        nodes.sort_unstable_by_key(Tensor::id);
        GraphTape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    /// Op names in recording order; leaves show as `"leaf"`.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| n.op_name().unwrap_or("leaf"))
            .collect()
    }

    pub(crate) fn run_backward(&self, root: &Tensor) -> Result<()> {
        if !root.requires_grad() {
            return Ok(());
        }
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(root.id(), vec![1.0; root.numel()]);
        for node in self.nodes.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            let Some(gf) = &node.0.grad_fn else {
                node.accumulate_grad(&g);
                continue;
            };
            let parent_grads = (gf.backward)(&g);
            if parent_grads.len() != gf.parents.len() {
                return Err(TensorError::Contract(format!(
                    "backward of {} returned {} grads for {} parents",
                    gf.op,
                    parent_grads.len(),
                    gf.parents.len()
                )));
            }
            for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel(), "grad size from {}", gf.op);
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}
