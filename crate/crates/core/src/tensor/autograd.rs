use std::collections::{HashMap, HashSet};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Operations reachable from a root, in an order where every tensor follows its inputs.
///
/// Backward replays the tape from the end, so each node's gradient is complete before it is
/// pushed to its parents and each leaf is written exactly once per pass.
pub struct ComputationTape<T: Scalar> {
    entries: Vec<Tensor<T>>,
}

impl<T: Scalar> ComputationTape<T> {
    pub fn record(root: &Tensor<T>) -> Self {
        let mut entries = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children pushed?)
        let mut stack = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                entries.push(t);
                continue;
            }
            if !t.requires_grad() || !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(g) = t.grad_fn() {
                for p in g.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        ComputationTape { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Tensor<T>] {
        &self.entries
    }

    /// Names of the recorded operations in forward order (leaves excluded).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.entries.iter().filter_map(|t| t.op_name()).collect()
    }

    /// First recorded tensor holding a non-finite value, reported by producing op.
    pub fn check_finite(&self) -> Result<()> {
        for t in &self.entries {
            if !t.all_finite() {
                return Err(Error::NonFinite {
                    op: t.op_name().unwrap_or("leaf").to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn backward_from(&self, root: &Tensor<T>, seed: Vec<T>) -> Result<()> {
        if seed.len() != root.numel() {
            return Err(Error::shape(
                "backward",
                "seed gradient does not match root",
            ));
        }
        if !root.requires_grad() {
            return Ok(());
        }
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(root.id(), seed);
        for t in self.entries.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match t.grad_fn() {
                None => t.accumulate_grad(&g),
                Some(f) => {
                    let grads = (f.backward)(t.data(), &g);
                    debug_assert_eq!(grads.len(), f.parents.len(), "op {}", f.op);
                    for (p, pg) in f.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "op {}", f.op);
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_leaf_is_written_once_with_summed_gradient() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let tape = ComputationTape::record(&y);
        assert_eq!(
            tape.entries().iter().filter(|t| t.id() == x.id()).count(),
            1
        );
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 5.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let c = Tensor::<f64>::scalar(3.0);
        let y = x.mul(&c).unwrap().sum();
        let tape = ComputationTape::record(&y);
        assert!(tape.entries().iter().all(|t| t.requires_grad()));
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let y = x.scale(3.0).sum();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }
}
