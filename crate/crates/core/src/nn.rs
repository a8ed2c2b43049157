//! Layer helpers shared by the surrogate and the denoiser.

use std::collections::HashMap;

use vmb_autodiff::{Init, ParamSet, Real, Var};

use crate::error::{invalid, Result};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Parameters recorded on one tape, addressable by name.
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
    index: HashMap<String, usize>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn new(params: &ParamSet<T>, vars: Vec<Var<'t, T>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { vars, index }
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| invalid("model parameters", format!("missing `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn conv(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        let b = if self.has(&format!("{name}.b")) { Some(self.get(&format!("{name}.b"))?) } else { None };
        Ok(x.conv2d(self.get(&format!("{name}.w"))?, b)?)
    }

    pub fn linear(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        Ok(x.linear(self.get(&format!("{name}.w"))?, self.get(&format!("{name}.b"))?)?)
    }

    /// `gelu(instance_norm(conv(x)))`.
    pub fn conv_norm_act(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        Ok(self.conv(x, name)?.instance_norm(T::lit(NORM_EPS))?.gelu()?)
    }

    /// `gelu(x' + norm(conv2(gelu(norm(conv1(x))))))`, `x'` a 1×1 projection
    /// of `x` when the widths differ. `inject` (`[B,C]`) is added per channel
    /// after the first activation.
    pub fn residual_block(&self, x: Var<'t, T>, name: &str, inject: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let eps = T::lit(NORM_EPS);
        let mut h = self.conv(x, &format!("{name}.conv1"))?.instance_norm(eps)?.gelu()?;
        if let Some(e) = inject {
            h = h.add_channel_bias(e)?;
        }
        let h = self.conv(h, &format!("{name}.conv2"))?.instance_norm(eps)?;
        let skip = if self.has(&format!("{name}.skip.w")) { self.conv(x, &format!("{name}.skip"))? } else { x };
        Ok(h.add(skip)?.gelu()?)
    }
}

/// Accumulates named, initialized parameters in a fixed order.
pub struct Builder {
    pub params: ParamSet<f32>,
    pub init: Init,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self { params: ParamSet::new(), init: Init::new(seed) }
    }

    pub fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, bias: bool) {
        let n = out * inp * k * k;
        let w = self.init.kaiming(n, inp * k * k);
        self.params.add(format!("{name}.w"), &[out, inp, k, k], w);
        if bias {
            self.params.add(format!("{name}.b"), &[out], vec![0.0; out]);
        }
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize) {
        let w = self.init.kaiming(out * inp, inp);
        self.params.add(format!("{name}.w"), &[out, inp], w);
        self.params.add(format!("{name}.b"), &[out], vec![0.0; out]);
    }

    pub fn residual_block(&mut self, name: &str, inp: usize, out: usize) {
        self.conv(&format!("{name}.conv1"), out, inp, 3, true);
        self.conv(&format!("{name}.conv2"), out, out, 3, true);
        if inp != out {
            self.conv(&format!("{name}.skip"), out, inp, 1, false);
        }
    }

    pub fn finish(self) -> ParamSet<f32> {
        self.params
    }
}
