//! Per-channel and per-pixel ops on `[B,C,H,W]` feature maps: instance
//! normalization and the pooling/scaling pieces of channel and spatial
//! attention.

use crate::error::{invalid, mismatch, AdError, Result};
use crate::real::Real;
use crate::tape::Var;

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() != 4 {
        return Err(invalid(op, format!("expected [B,C,H,W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

impl<'t, T: Real> Var<'t, T> {
    /// Normalizes every (sample, channel) plane to zero mean, unit variance.
    pub fn instance_norm(self, eps: T) -> Result<Var<'t, T>> {
        let (_, _, hw) = dims4("instance_norm", &self.shape())?;
        let n = T::lit(hw as f64);
        let (value, inv_std) = {
            let x = self.value();
            let mut out = vec![T::zero(); x.len()];
            let mut inv = Vec::with_capacity(x.len() / hw);
            for (xp, op) in x.chunks_exact(hw).zip(out.chunks_exact_mut(hw)) {
                let mean = xp.iter().copied().sum::<T>() / n;
                let var = xp.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                for (o, &v) in op.iter_mut().zip(xp) {
                    *o = (v - mean) * is;
                }
                inv.push(is);
            }
            (out, inv)
        };
        self.tape.record("instance_norm", self.shape(), value, &[self], move |ctx| {
            let y = ctx.output();
            let mut gx = vec![T::zero(); y.len()];
            for (p, ((gp, yp), gxp)) in ctx
                .grad
                .chunks_exact(hw)
                .zip(y.chunks_exact(hw))
                .zip(gx.chunks_exact_mut(hw))
                .enumerate()
            {
                let mg = gp.iter().copied().sum::<T>() / n;
                let mgy = gp.iter().zip(yp).map(|(&g, &y)| g * y).sum::<T>() / n;
                for ((o, &g), &y) in gxp.iter_mut().zip(gp).zip(yp) {
                    *o = inv_std[p] * (g - mg - y * mgy);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Spatial mean per channel: `[B,C,H,W] → [B,C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let (b, c, hw) = dims4("global_avg_pool", &s)?;
        let n = T::lit(hw as f64);
        let value: Vec<T> = self
            .value()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        self.tape.record("global_avg_pool", vec![b, c], value, &[self], move |ctx| {
            vec![Some(ctx.grad.iter().flat_map(|&g| std::iter::repeat_n(g / n, hw)).collect())]
        })
    }

    /// Mean over channels: `[B,C,H,W] → [B,1,H,W]`.
    pub fn channel_mean(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let (b, c, hw) = dims4("channel_mean", &s)?;
        let n = T::lit(c as f64);
        let value = {
            let x = self.value();
            let mut out = vec![T::zero(); b * hw];
            for bi in 0..b {
                let o = &mut out[bi * hw..(bi + 1) * hw];
                for ci in 0..c {
                    let p = &x[(bi * c + ci) * hw..][..hw];
                    o.iter_mut().zip(p).for_each(|(o, &v)| *o += v);
                }
                o.iter_mut().for_each(|v| *v = *v / n);
            }
            out
        };
        self.tape.record("channel_mean", vec![b, 1, s[2], s[3]], value, &[self], move |ctx| {
            let mut gx = vec![T::zero(); b * c * hw];
            for bi in 0..b {
                let g = &ctx.grad[bi * hw..(bi + 1) * hw];
                for ci in 0..c {
                    gx[(bi * c + ci) * hw..][..hw]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, &g)| *o = g / n);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Max over channels: `[B,C,H,W] → [B,1,H,W]`; gradient goes to the
    /// first maximal channel.
    pub fn channel_max(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let (b, c, hw) = dims4("channel_max", &s)?;
        let (value, arg) = {
            let x = self.value();
            let mut out = vec![T::neg_infinity(); b * hw];
            let mut arg = vec![0usize; b * hw];
            for bi in 0..b {
                for ci in 0..c {
                    let p = &x[(bi * c + ci) * hw..][..hw];
                    for (i, &v) in p.iter().enumerate() {
                        if v > out[bi * hw + i] {
                            out[bi * hw + i] = v;
                            arg[bi * hw + i] = ci;
                        }
                    }
                }
            }
            (out, arg)
        };
        self.tape.record("channel_max", vec![b, 1, s[2], s[3]], value, &[self], move |ctx| {
            let mut gx = vec![T::zero(); b * c * hw];
            for (j, &g) in ctx.grad.iter().enumerate() {
                let (bi, i) = (j / hw, j % hw);
                gx[(bi * c + arg[j]) * hw + i] = g;
            }
            vec![Some(gx)]
        })
    }

    /// `x[b,c,:,:] * s[b,c]`.
    pub fn scale_channels(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.per_channel(s, true)
    }

    /// `x[b,c,:,:] + e[b,c]`.
    pub fn add_channel_bias(self, e: Var<'t, T>) -> Result<Var<'t, T>> {
        self.per_channel(e, false)
    }

    fn per_channel(self, s: Var<'t, T>, multiply: bool) -> Result<Var<'t, T>> {
        let op = if multiply { "scale_channels" } else { "add_channel_bias" };
        if !self.same_tape(&s) {
            return Err(AdError::ForeignTape);
        }
        let (sx, ss) = (self.shape(), s.shape());
        let (b, c, hw) = dims4(op, &sx)?;
        if ss != [b, c] {
            return Err(mismatch(op, &sx, &ss));
        }
        let value = Var::with_values(&[self, s], |v| {
            let mut out = v[0].to_vec();
            for (p, plane) in out.chunks_exact_mut(hw).enumerate() {
                let k = v[1][p];
                if multiply {
                    plane.iter_mut().for_each(|x| *x *= k);
                } else {
                    plane.iter_mut().for_each(|x| *x += k);
                }
            }
            out
        });
        self.tape.record(op, sx, value, &[self, s], move |ctx| {
            let (x, sv, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            let gx = ctx.needs(0).then(|| {
                if multiply {
                    g.chunks_exact(hw)
                        .enumerate()
                        .flat_map(|(p, gp)| gp.iter().map(move |&v| v * sv[p]))
                        .collect()
                } else {
                    g.to_vec()
                }
            });
            let gs = ctx.needs(1).then(|| {
                g.chunks_exact(hw)
                    .zip(x.chunks_exact(hw))
                    .map(|(gp, xp)| {
                        if multiply {
                            gp.iter().zip(xp).map(|(&g, &x)| g * x).sum::<T>()
                        } else {
                            gp.iter().copied().sum::<T>()
                        }
                    })
                    .collect()
            });
            vec![gx, gs]
        })
    }

    /// `x[b,c,y,x] * s[b,0,y,x]`.
    pub fn scale_spatial(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        if !self.same_tape(&s) {
            return Err(AdError::ForeignTape);
        }
        let (sx, ss) = (self.shape(), s.shape());
        let (b, c, hw) = dims4("scale_spatial", &sx)?;
        if ss != [b, 1, sx[2], sx[3]] {
            return Err(mismatch("scale_spatial", &sx, &ss));
        }
        let value = Var::with_values(&[self, s], |v| {
            let mut out = v[0].to_vec();
            for bi in 0..b {
                let sp = &v[1][bi * hw..(bi + 1) * hw];
                for ci in 0..c {
                    out[(bi * c + ci) * hw..][..hw]
                        .iter_mut()
                        .zip(sp)
                        .for_each(|(o, &k)| *o *= k);
                }
            }
            out
        });
        self.tape.record("scale_spatial", sx, value, &[self, s], move |ctx| {
            let (x, sv, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            let gx = ctx.needs(0).then(|| {
                let mut gx = g.to_vec();
                for bi in 0..b {
                    let sp = &sv[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        gx[(bi * c + ci) * hw..][..hw]
                            .iter_mut()
                            .zip(sp)
                            .for_each(|(o, &k)| *o *= k);
                    }
                }
                gx
            });
            let gs = ctx.needs(1).then(|| {
                let mut gs = vec![T::zero(); b * hw];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for i in 0..hw {
                            gs[bi * hw + i] += g[off + i] * x[off + i];
                        }
                    }
                }
                gs
            });
            vec![gx, gs]
        })
    }
}
