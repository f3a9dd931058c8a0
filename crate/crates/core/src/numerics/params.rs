use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::numerics::{Real, Rng, Tensor};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.tensors[id] = t;
            return id;
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64c(rng.normal() * std)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> usize {
        self.insert(name, Tensor::full(shape.to_vec(), F::from_f64c(value)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor<F> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn assign(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let Some(id) = self.id(name) else {
            return shape_err(format!("no parameter named {name}"));
        };
        if self.tensors[id].shape() != t.shape() {
            return shape_err(format!(
                "parameter {name}: stored {:?}, given {:?}",
                self.tensors[id].shape(),
                t.shape()
            ));
        }
        self.tensors[id] = t;
        Ok(())
    }
}
