//! Elementwise, dense and reduction primitives.

use crate::error::{invalid, mismatch, AdError, Result};
use crate::real::{gemm, Real};
use crate::tape::Var;

/// How the smaller operand of a binary op repeats over the larger one.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` has the shape of `a` without its leading (batch) dim.
    RepeatB,
    /// `a` has the shape of `b` without its leading dim.
    RepeatA,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if a == b {
        Ok((Broadcast::Same, a.to_vec()))
    } else if !a.is_empty() && &a[1..] == b {
        Ok((Broadcast::RepeatB, a.to_vec()))
    } else if !b.is_empty() && &b[1..] == a {
        Ok((Broadcast::RepeatA, b.to_vec()))
    } else {
        Err(mismatch(op, a, b))
    }
}

/// Sums `g` (length `n·k`) down to length `k`.
fn reduce_repeats<T: Real>(g: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k];
    for chunk in g.chunks_exact(k) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += *v);
    }
    out
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl<'t, T: Real> Var<'t, T> {
    fn check_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if self.same_tape(other) {
            Ok(())
        } else {
            Err(AdError::ForeignTape)
        }
    }

    fn binary(self, other: Var<'t, T>, kind: BinOp) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let name = match kind {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        };
        let (bc, shape) = broadcast(name, &self.shape(), &other.shape())?;
        let value = Var::with_values(&[self, other], |v| {
            let (a, b) = (v[0], v[1]);
            let n = a.len().max(b.len());
            let (ka, kb) = (a.len(), b.len());
            (0..n)
                .map(|i| {
                    let (x, y) = (a[i % ka], b[i % kb]);
                    match kind {
                        BinOp::Add => x + y,
                        BinOp::Sub => x - y,
                        BinOp::Mul => x * y,
                    }
                })
                .collect::<Vec<T>>()
        });
        self.tape.record(name, shape, value, &[self, other], move |ctx| {
            let g = ctx.grad;
            let (a, b) = (ctx.input(0), ctx.input(1));
            let (ka, kb) = (a.len(), b.len());
            let ga = ctx.needs(0).then(|| {
                let full: Vec<T> = match kind {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * b[i % kb]).collect(),
                };
                match bc {
                    Broadcast::RepeatA => reduce_repeats(&full, ka),
                    _ => full,
                }
            });
            let gb = ctx.needs(1).then(|| {
                let full: Vec<T> = match kind {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|&x| -x).collect(),
                    BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * a[i % ka]).collect(),
                };
                match bc {
                    Broadcast::RepeatB => reduce_repeats(&full, kb),
                    _ => full,
                }
            });
            vec![ga, gb]
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Sub)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        let value: Vec<T> = self.value().iter().map(|&x| x * s).collect();
        self.tape.record("scale", self.shape(), value, &[self], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn add_scalar(self, s: T) -> Result<Var<'t, T>> {
        let value: Vec<T> = self.value().iter().map(|&x| x + s).collect();
        self.tape.record("add_scalar", self.shape(), value, &[self], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let old = self.shape();
        if old.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(mismatch("reshape", &old, shape));
        }
        let value = self.to_vec();
        self.tape.record("reshape", shape.to_vec(), value, &[self], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let value: Vec<T> = self.value().iter().map(|&x| f(x)).collect();
        self.tape.record(op, self.shape(), value, &[self], move |ctx| {
            let (x, y) = (ctx.input(0), ctx.output());
            let g = ctx
                .grad
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(
            "relu",
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary("gelu", gelu, gelu_grad)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let s: T = self.value().iter().copied().sum();
        self.tape.record("sum", vec![], vec![s], &[self], |ctx| {
            let n = ctx.input(0).len();
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        self.sum()?.scale(T::one() / T::lit(n as f64))
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&target)?;
        let (sa, sb) = (self.shape(), target.shape());
        if sa != sb {
            return Err(mismatch("mse", &sa, &sb));
        }
        let n = T::lit(self.numel() as f64);
        let value = Var::with_values(&[self, target], |v| {
            v[0].iter().zip(v[1]).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n
        });
        self.tape.record("mse", vec![], vec![value], &[self, target], move |ctx| {
            let (a, b) = (ctx.input(0), ctx.input(1));
            let c = ctx.grad[0] * T::lit(2.0) / n;
            let d: Vec<T> = a.iter().zip(b).map(|(&a, &b)| c * (a - b)).collect();
            let gb = ctx.needs(1).then(|| d.iter().map(|&x| -x).collect());
            vec![Some(d), gb]
        })
    }

    /// `[n,k] · [k,m] → [n,m]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = Var::with_values(&[self, other], |v| {
            let mut c = vec![T::zero(); n * m];
            gemm(n, k, m, v[0], false, v[1], false, T::zero(), &mut c);
            c
        });
        self.tape.record("matmul", vec![n, m], value, &[self, other], move |ctx| {
            let g = ctx.grad;
            let ga = ctx.needs(0).then(|| {
                let mut ga = vec![T::zero(); n * k];
                gemm(n, m, k, g, false, ctx.input(1), true, T::zero(), &mut ga);
                ga
            });
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![T::zero(); k * m];
                gemm(k, n, m, ctx.input(0), true, g, false, T::zero(), &mut gb);
                gb
            });
            vec![ga, gb]
        })
    }

    /// Affine map `x·wᵀ + b` with `x:[n,in]`, `w:[out,in]`, `b:[out]`.
    pub fn linear(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&w)?;
        self.check_tape(&b)?;
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(mismatch("linear", &sx, &sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("linear", &sw, &sb));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let value = Var::with_values(&[self, w, b], |v| {
            let mut c: Vec<T> = (0..n).flat_map(|_| v[2].iter().copied()).collect();
            gemm(n, din, dout, v[0], false, v[1], true, T::one(), &mut c);
            c
        });
        self.tape.record("linear", vec![n, dout], value, &[self, w, b], move |ctx| {
            let g = ctx.grad;
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![T::zero(); n * din];
                gemm(n, dout, din, g, false, ctx.input(1), false, T::zero(), &mut gx);
                gx
            });
            let gw = ctx.needs(1).then(|| {
                let mut gw = vec![T::zero(); dout * din];
                gemm(dout, n, din, g, true, ctx.input(0), false, T::zero(), &mut gw);
                gw
            });
            let gb = ctx.needs(2).then(|| reduce_repeats(g, dout));
            vec![gx, gw, gb]
        })
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T, _y: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}
