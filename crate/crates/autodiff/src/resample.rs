//! Scale changes for U-Net style encoders/decoders.

use crate::error::{invalid, mismatch, AdError, Result};
use crate::real::Real;
use crate::tape::Var;

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if s.len() != 4 {
        return Err(invalid(op, format!("expected [B,C,H,W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Two-tap interpolation table for ×2 bilinear upsampling with half-pixel
/// centers and edge clamping.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                let lo = i.saturating_sub(1);
                (lo, i, 0.25, 0.75)
            } else {
                let hi = (i + 1).min(n - 1);
                (i, hi, 0.75, 0.25)
            }
        })
        .collect()
}

impl<'t, T: Real> Var<'t, T> {
    /// 2×2 average pooling; spatial dims must be even.
    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let (b, c, h, w) = dims4("avg_pool2", &self.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("avg_pool2", format!("odd spatial dims {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let value = {
            let x = self.value();
            let mut out = vec![T::zero(); b * c * ho * wo];
            for p in 0..b * c {
                let xp = &x[p * h * w..];
                let op = &mut out[p * ho * wo..];
                for y in 0..ho {
                    for xx in 0..wo {
                        let i = 2 * y * w + 2 * xx;
                        op[y * wo + xx] = (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]) * q;
                    }
                }
            }
            out
        };
        self.tape.record("avg_pool2", vec![b, c, ho, wo], value, &[self], move |ctx| {
            let mut gx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let gp = &ctx.grad[p * ho * wo..];
                let gxp = &mut gx[p * h * w..];
                for y in 0..ho {
                    for xx in 0..wo {
                        let v = gp[y * wo + xx] * q;
                        let i = 2 * y * w + 2 * xx;
                        gxp[i] = v;
                        gxp[i + 1] = v;
                        gxp[i + w] = v;
                        gxp[i + w + 1] = v;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// ×2 nearest-neighbour upsampling.
    pub fn upsample2_nearest(self) -> Result<Var<'t, T>> {
        let (b, c, h, w) = dims4("upsample2_nearest", &self.shape())?;
        let (ho, wo) = (2 * h, 2 * w);
        let value = {
            let x = self.value();
            let mut out = vec![T::zero(); b * c * ho * wo];
            for p in 0..b * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        out[p * ho * wo + y * wo + xx] = x[p * h * w + (y / 2) * w + xx / 2];
                    }
                }
            }
            out
        };
        self.tape
            .record("upsample2_nearest", vec![b, c, ho, wo], value, &[self], move |ctx| {
                let mut gx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[p * h * w + (y / 2) * w + xx / 2] += ctx.grad[p * ho * wo + y * wo + xx];
                        }
                    }
                }
                vec![Some(gx)]
            })
    }

    /// ×2 bilinear upsampling (half-pixel centers, clamped edges).
    pub fn upsample2_bilinear(self) -> Result<Var<'t, T>> {
        let (b, c, h, w) = dims4("upsample2_bilinear", &self.shape())?;
        let (ho, wo) = (2 * h, 2 * w);
        let ty = bilinear_taps(h);
        let tx = bilinear_taps(w);
        let value = {
            let x = self.value();
            let mut out = vec![T::zero(); b * c * ho * wo];
            let mut rowbuf = vec![T::zero(); wo];
            for p in 0..b * c {
                let xp = &x[p * h * w..(p + 1) * h * w];
                for (yo, &(y0, y1, a0, a1)) in ty.iter().enumerate() {
                    let (a0, a1) = (T::lit(a0), T::lit(a1));
                    for (xo, &(x0, x1, b0, b1)) in tx.iter().enumerate() {
                        let (b0, b1) = (T::lit(b0), T::lit(b1));
                        rowbuf[xo] = a0 * (b0 * xp[y0 * w + x0] + b1 * xp[y0 * w + x1])
                            + a1 * (b0 * xp[y1 * w + x0] + b1 * xp[y1 * w + x1]);
                    }
                    out[p * ho * wo + yo * wo..][..wo].copy_from_slice(&rowbuf);
                }
            }
            out
        };
        self.tape
            .record("upsample2_bilinear", vec![b, c, ho, wo], value, &[self], move |ctx| {
                let mut gx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    let gp = &ctx.grad[p * ho * wo..(p + 1) * ho * wo];
                    let gxp = &mut gx[p * h * w..(p + 1) * h * w];
                    for (yo, &(y0, y1, a0, a1)) in ty.iter().enumerate() {
                        let (a0, a1) = (T::lit(a0), T::lit(a1));
                        for (xo, &(x0, x1, b0, b1)) in tx.iter().enumerate() {
                            let (b0, b1) = (T::lit(b0), T::lit(b1));
                            let g = gp[yo * wo + xo];
                            gxp[y0 * w + x0] += g * a0 * b0;
                            gxp[y0 * w + x1] += g * a0 * b1;
                            gxp[y1 * w + x0] += g * a1 * b0;
                            gxp[y1 * w + x1] += g * a1 * b1;
                        }
                    }
                }
                vec![Some(gx)]
            })
    }

    /// Concatenates `[B,Ca,H,W]` and `[B,Cb,H,W]` along channels.
    pub fn concat_channels(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        if !self.same_tape(&other) {
            return Err(AdError::ForeignTape);
        }
        let (sa, sb) = (self.shape(), other.shape());
        let (b, ca, h, w) = dims4("concat_channels", &sa)?;
        let (b2, cb, h2, w2) = dims4("concat_channels", &sb)?;
        if (b, h, w) != (b2, h2, w2) {
            return Err(mismatch("concat_channels", &sa, &sb));
        }
        let (na, nb) = (ca * h * w, cb * h * w);
        let value = Var::with_values(&[self, other], |v| {
            let mut out = Vec::with_capacity(b * (na + nb));
            for bi in 0..b {
                out.extend_from_slice(&v[0][bi * na..(bi + 1) * na]);
                out.extend_from_slice(&v[1][bi * nb..(bi + 1) * nb]);
            }
            out
        });
        self.tape
            .record("concat_channels", vec![b, ca + cb, h, w], value, &[self, other], move |ctx| {
                let g = ctx.grad;
                let ga = ctx.needs(0).then(|| {
                    (0..b).flat_map(|bi| g[bi * (na + nb)..][..na].iter().copied()).collect()
                });
                let gb = ctx.needs(1).then(|| {
                    (0..b).flat_map(|bi| g[bi * (na + nb) + na..][..nb].iter().copied()).collect()
                });
                vec![ga, gb]
            })
    }
}
