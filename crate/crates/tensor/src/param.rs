use std::collections::HashMap;

use crate::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Non-trainable entries (running statistics) are persisted but never
    /// touched by the optimizer.
    pub trainable: bool,
}

/// Named, ordered collection of model tensors; the unit of checkpointing.
#[derive(Clone, Debug)]
pub struct ParameterStore<T = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::invalid("parameter store", format!("duplicate entry `{name}`")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::shape(
                "parameter store",
                value.shape(),
                format!("`{}` expects {:?}", p.name, p.value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != grad.shape() {
            return Err(TensorError::shape(
                "accumulate_grad",
                grad.shape(),
                format!("`{}` expects {:?}", p.name, p.value.shape()),
            ));
        }
        match &mut p.grad {
            Some(existing) => {
                for (e, &g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e = *e + g;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Total number of scalar values in trainable entries.
    pub fn trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Fills every entry whose name satisfies `pred` with zeros.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if pred(&p.name) {
                p.value = Tensor::zeros(p.value.shape().to_vec());
                n += 1;
            }
        }
        n
    }
}
