use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    /// Whether decoupled weight decay applies. Off for norms and biases.
    pub decay: bool,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Parameter>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, value: Tensor<f32>, decay: bool) -> usize {
        debug_assert!(self.entries.iter().all(|p| p.name != name), "duplicate {name}");
        self.entries.push(Parameter { name, value, decay });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Removes and returns the tensor called `name`.
    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.entries.iter().position(|p| p.name == name)?;
        Some(self.entries.remove(i).value)
    }

    pub fn by_name(&self) -> HashMap<&str, &Tensor<f32>> {
        self.entries.iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }
}

impl std::ops::Index<usize> for ParamStore {
    type Output = Parameter;

    fn index(&self, i: usize) -> &Parameter {
        &self.entries[i]
    }
}

impl std::ops::IndexMut<usize> for ParamStore {
    fn index_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.entries[i]
    }
}
