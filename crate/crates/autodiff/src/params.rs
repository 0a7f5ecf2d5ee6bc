use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named trainable tensors in insertion order.
///
/// Names are dotted paths such as `encoder.block0.attn.wq`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`, in order.
    pub fn filter_prefix(&self, prefix: &str) -> ParameterSet {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Appends every entry of `other`; names must not collide.
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (name, tensor) in other.entries {
            self.insert(name, tensor)?;
        }
        Ok(())
    }

    /// Overwrites values of existing entries from `other` (matching names and
    /// shapes). Entries of `other` not present here are an error.
    pub fn load_values(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, src) in other.iter() {
            let dst = self
                .entries
                .get_mut(name)
                .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))?;
            if dst.shape() != src.shape() {
                return Err(TensorError::Shape {
                    op: "load_values",
                    left: dst.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for t in self.entries.values_mut() {
            t.set_requires_grad(flag);
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// Adds the tape's leaf gradients into each trainable parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) -> Result<()> {
        for (name, var) in &bindings.vars {
            let Some(tensor) = self.entries.get_mut(name) else {
                continue;
            };
            if !tensor.requires_grad() {
                continue;
            }
            match tape.grad(*var) {
                Some(g) => tensor.accumulate_grad(g)?,
                None => tensor.accumulate_grad(&vec![0.0; tensor.numel()])?,
            }
        }
        Ok(())
    }
}

/// Maps parameter names to their leaves on one tape.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Adds the bindings of a second parameter set bound on the same tape.
    pub fn extend(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable_and_names_unique() {
        let mut p = ParameterSet::new();
        p.insert("b", Tensor::zeros(vec![1])).unwrap();
        p.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![2])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(p.numel(), 3);
    }

    #[test]
    fn grads_flow_back_into_parameters() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad())
            .unwrap();
        p.insert("frozen", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let w = b.get("w").unwrap();
        let f = b.get("frozen").unwrap();
        let y = tape.mul(w, f).unwrap();
        let y = tape.mul(y, w).unwrap();
        let l = tape.sum(y, None).unwrap();
        tape.backward(l).unwrap();
        p.accumulate_grads(&tape, &b).unwrap();
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
        assert!(p.get("frozen").unwrap().grad().is_none());
        assert!(b.get("missing").is_err());
    }
}
