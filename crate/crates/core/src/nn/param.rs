use rand::Rng;

use super::{Matrix, NnError};

/// A trainable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || values.len() != n {
            return Err(NnError::Shape(format!(
                "{} values cannot fill shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
        })
    }

    /// Glorot-uniform initialization over a 2-D `[fan_in, fan_out]` shape
    /// (1-D shapes use `fan_in = 1`).
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let (fan_in, fan_out) = match shape {
            [n] => (1, *n),
            [i, o, ..] => (*i, *o),
            [] => (1, 1),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut t = Self::zeros(shape);
        for v in &mut t.values {
            *v = rng.random_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// View the values as a matrix. 1-D tensors become a single row.
    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (1, other.iter().product()),
        };
        Matrix::from_vec(r, c, self.values.clone())
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// An ordered collection of named tensors.
///
/// This is the unit the optimizer, the checkpoint container, averaging and
/// the EMA update all operate on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<ParamTensor>,
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ParamTensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate tensor {name}");
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

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.index_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index_of(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(ParamTensor::zero_grad);
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so that their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for t in &mut self.tensors {
                t.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        for (name, t) in self.iter() {
            if !t.values.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite(format!("parameter {name}")));
            }
            if !t.grad.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }

    /// Copy of the values with gradients cleared.
    pub fn snapshot(&self) -> ParamSet {
        let mut s = self.clone();
        s.zero_grad();
        s
    }

    /// `self <- alpha * self + (1 - alpha) * source`, over values only.
    pub fn ema_update(&mut self, source: &ParamSet, alpha: f64) -> Result<(), NnError> {
        if !self.same_layout(source) {
            return Err(NnError::Shape("EMA between different layouts".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&source.tensors) {
            for (d, s) in dst.values.iter_mut().zip(&src.values) {
                *d = alpha * *d + (1.0 - alpha) * s;
            }
        }
        Ok(())
    }
}

/// Elementwise arithmetic mean of a list of parameter sets.
pub fn average_params(checkpoints: &[ParamSet]) -> Result<ParamSet, NnError> {
    let first = checkpoints
        .first()
        .ok_or_else(|| NnError::Config("cannot average an empty checkpoint list".into()))?;
    if let Some(bad) = checkpoints.iter().position(|c| !c.same_layout(first)) {
        return Err(NnError::Shape(format!(
            "checkpoint {bad} does not match the layout of checkpoint 0"
        )));
    }
    let n = checkpoints.len() as f64;
    let mut out = first.snapshot();
    let mut column = Vec::with_capacity(checkpoints.len());
    for (i, t) in out.tensors.iter_mut().enumerate() {
        for (j, v) in t.values.iter_mut().enumerate() {
            column.clear();
            column.extend(checkpoints.iter().map(|c| c.tensors[i].values[j]));
            column.sort_by(f64::total_cmp);
            *v = column.iter().sum::<f64>() / n;
        }
    }
    Ok(out)
}
