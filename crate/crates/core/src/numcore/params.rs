use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model. Frozen parameters (`trainable == false`)
/// are never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
            grad: None,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total and trainable scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, tr), p| {
            let n = p.tensor.len();
            (t + n, if p.trainable { tr + n } else { tr })
        })
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Adds `grad` into the accumulated gradient of a trainable parameter.
    /// Gradients of frozen parameters are discarded.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Ok(());
        }
        if grad.len() != p.tensor.len() {
            return Err(Error::Dimension(format!("gradient length for {}", p.name)));
        }
        match &mut p.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(a, b)| *a += b),
            None => p.grad = Some(Tensor::from_parts(p.tensor.shape().to_vec(), grad.to_vec())),
        }
        Ok(())
    }

    /// Overwrites a parameter's values (checkpoint loading, finite differences).
    pub fn set_tensor(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Dimension(format!(
                "{}: expected shape {:?}, got {:?}",
                p.name,
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].tensor.data_mut()
    }

    /// Copies the values of every trainable parameter.
    pub fn snapshot_trainable(&self) -> Vec<(ParamId, Tensor)> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, p.tensor.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, t) in snapshot {
            self.set_tensor(*id, t.clone())?;
        }
        Ok(())
    }
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        let dist = Normal::new(0.0, std).expect("std is positive");
        (0..n).map(|_| dist.sample(rng)).collect()
    };
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if bound == 0.0 {
        vec![0.0; n]
    } else {
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound is positive");
        (0..n).map(|_| dist.sample(rng)).collect()
    };
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn frozen_grads_are_dropped() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2]), false).unwrap();
        let b = s.add("b", Tensor::zeros(&[2]), true).unwrap();
        s.accumulate_grad(a, &[1.0, 1.0]).unwrap();
        s.accumulate_grad(b, &[1.0, 2.0]).unwrap();
        s.accumulate_grad(b, &[1.0, 2.0]).unwrap();
        assert!(s.get(a).grad.is_none());
        assert_eq!(s.get(b).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        assert_eq!(s.counts(), (4, 2));
    }
}
