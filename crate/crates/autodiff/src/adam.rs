//! Adam with bias correction and an externally supplied learning rate.

use crate::error::{invalid, Result};
use crate::param::ParamSet;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one first/second moment buffer per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// State for slots of the given lengths.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Self::new(config, &sizes)
    }

    /// Zeroes the moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(T::zero()));
    }

    /// One update of every slot: `values[i] -= lr · m̂ / (√v̂ + ε)`.
    pub fn update(&mut self, values: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if values.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid(
                "adam",
                format!("expected {} slots, got {}/{}", self.m.len(), values.len(), grads.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for (slot, (x, g)) in values.iter_mut().zip(grads).enumerate() {
            if x.len() != g.len() || x.len() != self.m[slot].len() {
                return Err(invalid("adam", format!("slot {slot} length mismatch")));
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..x.len() {
                m[i] = b1 * m[i] + ob1 * g[i];
                v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                x[i] -= step_size * m[i] / denom;
            }
        }
        Ok(())
    }

    /// Updates a parameter set from its accumulated gradients.
    pub fn step_params(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        if let Some(err) = params.missing_grads() {
            return Err(err);
        }
        let grads: Vec<Vec<T>> = params.iter().map(|p| p.grad.clone().unwrap_or_default()).collect();
        let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        let mut values: Vec<&mut [T]> = params.iter_mut().map(|p| p.value.as_mut_slice()).collect();
        self.update(&mut values, &grad_refs, lr)
    }
}

/// `lr(i) = base · factor^⌊i / every⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            factor: 1.0,
            every: usize::MAX,
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.base * self.factor.powi((iteration / self.every.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::AdError;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [0.37f64, -12.0, 1e-3] {
            let mut adam = Adam::<f64>::new(AdamConfig::default(), &[1]);
            let mut x = [1.0];
            adam.update(&mut [&mut x], &[&[g]], 0.01).unwrap();
            let delta = x[0] - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 0.01 * 1e-4, "{delta}");
            assert!(delta.abs() <= 0.01 * (1.0 + 1e-8));
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), &[1]);
        let mut x = [1.0];
        for _ in 0..200 {
            let g = 2.0 * x[0];
            adam.update(&mut [&mut x], &[&[g]], 0.1).unwrap();
        }
        assert!(x[0].abs() < 1e-2, "{}", x[0]);
    }

    #[test]
    fn zero_gradient_leaves_values_but_advances_step() {
        let mut adam = Adam::<f32>::new(AdamConfig::default(), &[3]);
        let mut x = [1.0, -2.0, 3.0];
        adam.update(&mut [&mut x], &[&[0.0; 3]], 0.5).unwrap();
        assert_eq!(x, [1.0, -2.0, 3.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn step_decay_schedule() {
        let s = StepDecay { base: 0.01, factor: 0.8, every: 100 };
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(99), 0.01);
        assert!((s.lr_at(250) - 0.0064).abs() < 1e-15);
        assert_eq!(s.lr_at(250), 0.01 * 0.8f64.powi(2));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", &[2], vec![1.0, 1.0]);
        let mut adam = Adam::for_params(AdamConfig::default(), &p);
        assert!(matches!(adam.step_params(&mut p, 0.1), Err(AdError::MissingGrad(n)) if n == "w"));
    }
}
