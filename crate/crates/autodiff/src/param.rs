//! Persistent trainable tensors and their binding to a tape.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AdError, Result};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    /// Accumulated gradient; `None` until the first accumulation.
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Parameter<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered, named parameter collection. Layers refer to entries by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Parameter {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Records every parameter as a gradient-requiring leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant (frozen network).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| {
                tape.leaf(&p.shape, p.value.clone(), requires_grad)
                    .expect("parameter shape matches its value length")
            })
            .collect()
    }

    /// Adds the gradients of `bound` (from [`ParamSet::bind`]) into each
    /// parameter's `grad`.
    pub fn accumulate(&mut self, bound: &[Var<'_, T>], grads: &Gradients<T>) {
        for (p, v) in self.params.iter_mut().zip(bound) {
            let Some(g) = grads.get(*v) else { continue };
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Parameters whose gradient is missing, by name.
    pub fn missing_grads(&self) -> Option<AdError> {
        self.params
            .iter()
            .find(|p| p.grad.is_none())
            .map(|p| AdError::MissingGrad(p.name.clone()))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Element-type conversion (e.g. an f32 model checked in f64).
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                    grad: None,
                })
                .collect(),
        }
    }

    /// Copies values from `other` by position; shapes must agree.
    pub fn load_values(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(crate::error::invalid(
                "load_values",
                format!("expected {} parameters, got {}", self.len(), other.len()),
            ));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.shape != src.shape || dst.name != src.name {
                return Err(crate::error::invalid(
                    "load_values",
                    format!("{}{:?} vs {}{:?}", dst.name, dst.shape, src.name, src.shape),
                ));
            }
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }
}

/// Deterministic initializer for one model build.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Real>(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z * std)
            })
            .collect()
    }

    pub fn uniform<T: Real>(&mut self, n: usize, bound: f64) -> Vec<T> {
        (0..n)
            .map(|_| T::lit(self.rng.random_range(-bound..=bound)))
            .collect()
    }

    /// Kaiming-normal for a ReLU/GELU-family layer with `fan_in` inputs.
    pub fn kaiming<T: Real>(&mut self, n: usize, fan_in: usize) -> Vec<T> {
        self.normal(n, (2.0 / fan_in as f64).sqrt())
    }
}
