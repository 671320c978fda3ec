use rand::Rng;

use super::{Matrix, TensorError};

/// A trainable matrix together with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Option<Matrix>,
    m: Matrix,
    v: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: None,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        }
    }

    /// Glorot-uniform initialisation: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let value = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a));
        Self::new(name, value)
    }

    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let value = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound));
        Self::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros(rows, cols))
    }

    pub fn moments(&self) -> (&Matrix, &Matrix) {
        (&self.m, &self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) -> ParamId {
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values (not optimizer state) from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.params.len(), other.params.len());
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            assert_eq!(dst.value.shape(), src.value.shape());
            dst.value = src.value.clone();
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Bias-corrected Adam with an internal step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Parameter]) -> Result<(), TensorError> {
        self.t += 1;
        adam_step(params, self.lr, (self.beta1, self.beta2), self.eps, self.t)
    }
}

/// One Adam update at step `t` (1-based). Gradients are zeroed afterwards.
pub fn adam_step(
    params: &mut [Parameter],
    lr: f64,
    (beta1, beta2): (f64, f64),
    eps: f64,
    t: u64,
) -> Result<(), TensorError> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(TensorError::MissingGrad(p.name.clone()));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for p in params.iter_mut() {
        let g = p.grad.as_mut().expect("checked above");
        for (((w, m), v), gi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.m.data_mut())
            .zip(p.v.data_mut())
            .zip(g.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * *gi;
            *v = beta2 * *v + (1.0 - beta2) * *gi * *gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
            *gi = 0.0;
        }
    }
    Ok(())
}
