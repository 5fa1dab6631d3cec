//! Named parameter tensors and the dense layers built from them.

use rand::Rng;

use crate::numerics::{NumericsError, RealTensor, Tape, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<RealTensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: RealTensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[RealTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [RealTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(RealTensor::len).sum()
    }

    /// Register every tensor as a differentiable leaf, in store order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Builds parameters with a symmetric uniform initialization of scale
/// `1 / sqrt(fan_in)`.
pub struct Init<'a, R: Rng> {
    pub store: ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            store: ParamStore::default(),
            rng,
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> RealTensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        RealTensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[fan_in, fan_out], bound);
        let b = self.uniform(&[1, fan_out], bound);
        Linear {
            w: self.store.push(format!("{name}.w"), w),
            b: self.store.push(format!("{name}.b"), b),
        }
    }

    /// Two-layer perceptron `fan_in -> hidden -> fan_out`.
    pub fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.0"), fan_in, hidden),
            l2: self.linear(&format!("{name}.1"), hidden, fan_out),
        }
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var, NumericsError> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add(y, p[self.b])
    }
}

/// Linear, leaky ReLU, linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var, slope: f64) -> Result<Var, NumericsError> {
        let h = self.l1.apply(tape, p, x)?;
        let h = tape.leaky_relu(h, slope);
        self.l2.apply(tape, p, h)
    }
}
