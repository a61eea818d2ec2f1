use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{Float, Tape, Tensor, Var};

pub const BUFFER_PREFIX: &str = "buffer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Float> ParamStore<F> {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Sum of element counts of tensors that require grad.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n).collect()
    }

    /// Marks every tensor whose name satisfies `pred` as trainable and all
    /// others as frozen. Buffers (`buffer.*`) are never trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (n, t) in self.names.iter().zip(&mut self.tensors) {
            t.set_requires_grad(!n.starts_with(BUFFER_PREFIX) && pred(n));
        }
    }

    /// Registers every tensor on `tape`, in order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn load(&mut self, name: &str, shape: &[usize], data: Vec<F>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor `{name}` is not a model parameter")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "checkpoint tensor `{name}` has shape {shape:?}, model expects {:?}",
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

/// Glorot-uniform `rows × cols` matrix.
pub(crate) fn xavier<F: Float>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<F> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| F::of(rng.random_range(-a..a))).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent").with_grad()
}

pub(crate) fn zeros<F: Float>(n: usize) -> Tensor<F> {
    Tensor::zeros(&[n]).with_grad()
}

pub(crate) fn ones<F: Float>(n: usize) -> Tensor<F> {
    Tensor::full(&[n], F::one()).with_grad()
}
