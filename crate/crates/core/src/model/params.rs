use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Tape, Tensor, Var};

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.tensors
            .values_mut()
            .for_each(|t| t.set_requires_grad(requires_grad));
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate_grads(&mut self, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let t = self.tensors.get_mut(name).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter `{name}`"))
            })?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Parameters that currently hold a gradient, for an optimizer step.
    pub fn with_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors
            .iter_mut()
            .filter(|(_, t)| t.grad().is_some())
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let bare = Tensor::new(t.dims().to_vec(), t.values().to_vec()).expect("valid");
                (k.clone(), bare)
            })
            .collect();
        Checkpoint::new(meta, tensors)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        ParamStore {
            tensors: ck.tensors,
        }
    }

    /// Bit-level equality of values (grads and flags ignored).
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, t)| {
                other.tensors.get(k).is_some_and(|u| {
                    t.dims() == u.dims()
                        && t.values()
                            .iter()
                            .zip(u.values())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

/// Records parameters onto a tape, remembering which leaf belongs to which name.
///
/// Requesting a smaller extent than the stored tensor yields a leading-block view of it;
/// gradients then flow into the full tensor.
#[derive(Debug)]
pub struct Binder<'a> {
    store: &'a ParamStore,
    leaves: Vec<Leaf>,
}

#[derive(Debug, Clone)]
struct Leaf {
    name: String,
    var: Var,
    /// Union of the leading blocks requested so far.
    view: Vec<usize>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            leaves: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape<'a>, name: &str, dims: &[usize]) -> Result<Var> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        if dims.len() != t.dims().len() {
            return Err(Error::Shape(format!(
                "`{name}` has rank {}, view asks for {dims:?}",
                t.dims().len()
            )));
        }
        let leaf = match self.leaves.iter_mut().find(|l| l.name == name) {
            Some(l) => {
                l.view
                    .iter_mut()
                    .zip(dims)
                    .for_each(|(v, &d)| *v = (*v).max(d));
                l.var
            }
            None => {
                let var = tape.param(t);
                self.leaves.push(Leaf {
                    name: name.to_string(),
                    var,
                    view: dims.to_vec(),
                });
                var
            }
        };
        if t.dims() == dims {
            Ok(leaf)
        } else {
            tape.leading(leaf, dims)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Bound parameter names with their tape variables.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, Var)> {
        self.leaves.iter().map(|l| (l.name.as_str(), l.var))
    }

    /// Gradients of every bound leaf that received one.
    pub fn grads(&self, tape: &Tape<'_>) -> GradMap {
        self.leaves
            .iter()
            .filter_map(|l| tape.grad(l.var).map(|g| (l.name.clone(), g.to_vec())))
            .collect()
    }

    /// For each bound parameter, a mask of the elements inside the requested leading block.
    pub fn view_masks(&self) -> BTreeMap<String, Vec<bool>> {
        self.leaves
            .iter()
            .map(|l| {
                let full = self.store.get(&l.name).expect("bound").dims();
                (l.name.clone(), leading_mask(full, &l.view))
            })
            .collect()
    }
}

/// Row-major mask of the leading `view` block inside a tensor of extent `full`.
pub fn leading_mask(full: &[usize], view: &[usize]) -> Vec<bool> {
    let n: usize = full.iter().product();
    (0..n)
        .map(|mut i| {
            let mut inside = true;
            for (&f, &v) in full.iter().zip(view).rev() {
                inside &= i % f < v;
                i /= f;
            }
            inside
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leading_mask_marks_block() {
        let m = leading_mask(&[2, 3], &[1, 2]);
        assert_eq!(m, vec![true, true, false, false, false, false]);
        assert!(leading_mask(&[4], &[4]).iter().all(|&b| b));
    }
}
