use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
///
/// Registration order is the serialization order and is a pure function of
/// the model configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<R>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds per-parameter gradients, e.g. the output of
    /// [`Graph::param_grads`](crate::Graph::param_grads).
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<R>)]) -> Result<()> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Replaces the value of parameter `name`, checking the shape.
    pub fn assign(&mut self, name: &str, shape: &[usize], data: Vec<R>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Format(alloc::format!("unknown parameter '{name}'")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape {
            return Err(Error::Format(alloc::format!(
                "parameter '{name}' has shape {:?}, file holds {:?}",
                t.shape(),
                shape
            )));
        }
        *t = Tensor::new(shape.to_vec(), data)?.with_requires_grad(true);
        Ok(())
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.cast::<S>().with_requires_grad(true))
                .collect(),
        }
    }
}

/// Arithmetic mean of several stores with identical layout.
pub fn average_params<R: Real>(stores: &[&ParamStore<R>]) -> Result<ParamStore<R>> {
    let first = stores
        .first()
        .ok_or_else(|| Error::Usage("cannot average zero parameter sets".into()))?;
    if let Some(bad) = stores.iter().position(|s| !s.same_layout(first)) {
        return Err(Error::Format(alloc::format!(
            "parameter set {bad} does not match the layout of set 0"
        )));
    }
    let k = R::from_f64(stores.len() as f64);
    let mut out = (*first).clone();
    out.zero_grads();
    for (i, t) in out.tensors.iter_mut().enumerate() {
        let mut acc = vec![R::zero(); t.len()];
        for s in stores {
            acc.iter_mut()
                .zip(s.tensors[i].data())
                .for_each(|(a, &v)| *a += v);
        }
        t.data_mut()
            .iter_mut()
            .zip(acc)
            .for_each(|(d, a)| *d = a / k);
    }
    Ok(out)
}

/// Initializers for freshly registered parameters.
pub(crate) struct Init<'r, G: Rng> {
    pub rng: &'r mut G,
}

impl<G: Rng> Init<'_, G> {
    /// Glorot-uniform `rows × cols` matrix.
    pub fn glorot<R: Real>(&mut self, rows: usize, cols: usize) -> Tensor<R> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| R::from_f64(self.rng.random_range(-limit..limit)))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches")
    }

    /// Normal(0, std²) matrix.
    pub fn normal<R: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<R> {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                R::from_f64(z * std)
            })
            .collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches")
    }
}
