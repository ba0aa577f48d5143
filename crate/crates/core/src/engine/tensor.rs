use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// `(rows, cols)` view for rank-1 and rank-2 tensors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data[r * cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Stable handle into a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    tensor: Tensor,
    moments: Option<(Vec<f64>, Vec<f64>)>,
}

/// Named trainable parameters plus Adam state.
///
/// Removing a parameter leaves a tombstone so every other [`ParamId`] stays valid.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    slots: Vec<Option<Slot>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("parameter {name:?} already registered")));
        }
        let id = self.slots.len();
        self.index.insert(name.clone(), id);
        self.slots.push(Some(Slot {
            name,
            tensor,
            moments: None,
        }));
        Ok(ParamId(id))
    }

    pub fn remove(&mut self, name: &str) -> Result<Tensor> {
        let id = self
            .index
            .remove(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name:?}")))?;
        let slot = self.slots[id].take().expect("index points at live slot");
        Ok(slot.tensor)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn slot(&self, id: ParamId) -> &Slot {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    fn slot_mut(&mut self, id: ParamId) -> &mut Slot {
        self.slots[id.0].as_mut().expect("parameter was removed")
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slot(id).tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slot_mut(id).tensor
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slot(id).name
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Live parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| {
            s.as_ref()
                .map(|s| (ParamId(i), s.name.as_str(), &s.tensor))
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.iter().map(|(id, _, _)| id).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.iter_mut().flatten() {
            slot.tensor.clear_grad();
        }
    }

    pub fn has_grads(&self) -> bool {
        self.iter().any(|(_, _, t)| t.grad().is_some())
    }

    /// Order-sensitive hash over every parameter name, shape and bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (_, name, t) in self.iter() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for x in t.data() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// One Adam update over every parameter holding a gradient, then clears gradients.
    ///
    /// Parameters without a gradient are skipped (their moments are left untouched).
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.has_grads() {
            return Err(Error::State("adam_step called without gradients".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for slot in self.slots.iter_mut().flatten() {
            let Some(grad) = slot.tensor.grad.take() else {
                continue;
            };
            let n = grad.len();
            let (m, v) = slot
                .moments
                .get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, g), m), v) in slot
                .tensor
                .data
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Drops optimizer moments and resets the step counter (parameters untouched).
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for slot in self.slots.iter_mut().flatten() {
            slot.moments = None;
        }
    }
}
