use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with an accumulated-gradient slot.
///
/// Non-trainable entries (batch-norm running statistics) live in the same store so
/// that checkpoints see a single flat namespace.
#[derive(Clone, Debug)]
pub struct ParamTensor<R: Real = f32> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    pub trainable: bool,
}

impl<R: Real> ParamTensor<R> {
    fn new(name: String, value: Tensor<R>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name,
            value,
            grad,
            trainable,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real = f32> {
    entries: Vec<ParamTensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        self.push(ParamTensor::new(name.into(), value, true))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        self.push(ParamTensor::new(name.into(), value, false))
    }

    fn push(&mut self, p: ParamTensor<R>) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != p.name),
            "duplicate parameter name {}",
            p.name
        );
        self.entries.push(p);
        ParamId(self.entries.len() - 1)
    }

    /// Fan-in scaled uniform initialisation, bound `sqrt(1 / fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| R::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape/data agree"))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<R> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<R> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<R>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<R>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = R::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<R>) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.grad.shape(), g.shape());
        for (acc, v) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *acc += *v;
        }
    }

    /// Same names and values at another precision; gradients reset.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamTensor::new(e.name.clone(), e.value.cast(), e.trainable))
                .collect(),
        }
    }

    /// Overwrite values by name from `(name, tensor)` pairs. Every entry must be covered.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<R>)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let e = &mut self.entries[id.0];
            if e.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing tensor `{}`",
                self.entries[i].name
            )));
        }
        Ok(())
    }
}
