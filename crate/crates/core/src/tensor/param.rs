use std::collections::HashMap;

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients a finished backward pass left on this store's
    /// parameter leaves. Parameters that took part in the graph but received
    /// no gradient get an explicit zero gradient.
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        for (id, var) in graph.param_leaves() {
            let param = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| Error::State(format!("graph references unknown parameter {id:?}")))?;
            let incoming = graph
                .grad(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
            match &mut param.grad {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(incoming.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(incoming),
            }
        }
        Ok(())
    }

    /// Copies values from `(name, tensor)` records, requiring an exact match
    /// of names and shapes with this store.
    pub fn load_values(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for (name, value) in records {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter `{name}`")))?;
            let param = &mut self.params[id.0];
            if param.value.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    param.value.shape()
                )));
            }
            param.value = value;
            param.grad = None;
        }
        Ok(())
    }
}

/// Plain stochastic gradient descent: `p ← p − lr·grad`, then grads are
/// cleared.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    Sgd::new(lr, 0.0)?.step(store)
}

/// SGD with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Argument(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!(
                "parameter `{}` has no gradient; run backward first",
                p.name
            )));
        }
        if self.velocity.len() < store.params.len() {
            self.velocity.resize(store.params.len(), None);
        }
        for (p, vel) in store.params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p.grad.take().expect("checked above");
            if self.momentum == 0.0 {
                for (w, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                    *w -= self.lr * g;
                }
            } else {
                let v = vel.get_or_insert_with(|| vec![0.0; grad.numel()]);
                for ((w, g), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                    *v = self.momentum * *v + g;
                    *w -= self.lr * *v;
                }
            }
        }
        Ok(())
    }
}
