//! Stride-1 "same" 2D convolution (cross-correlation convention).

use crate::error::{invalid, mismatch, AdError, Result};
use crate::real::{gemm, Real};
use crate::tape::Var;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Unfolds one image `[c,h,w]` into `[c·kh·kw, h·w]` with zero padding.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for c in 0..g.c {
        let plane = &x[c * hw..(c + 1) * hw];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * hw..][..hw];
                let dy = i as isize - ph as isize;
                let dx = j as isize - pw as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for c in 0..g.c {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * hw..][..hw];
                let dy = i as isize - ph as isize;
                let ddx = j as isize - pw as isize;
                let x0 = (-ddx).max(0) as usize;
                let x1 = (w as isize - ddx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + ddx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    let src = &row[y * w + x0..y * w + x1];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// `x:[B,C,H,W]` ⋆ `k:[O,C,kh,kw]` (+ `bias:[O]`) → `[B,O,H,W]`, zero
    /// "same" padding, odd kernel sizes only.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        if !self.same_tape(&kernel) || bias.is_some_and(|b| !self.same_tape(&b)) {
            return Err(AdError::ForeignTape);
        }
        let (sx, sk) = (self.shape(), kernel.shape());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(mismatch("conv2d", &sx, &sk));
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel {sk:?} must have odd spatial size")));
        }
        let g = ConvGeom {
            b: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sk[0],
            kh: sk[2],
            kw: sk[3],
        };
        if let Some(b) = bias {
            let sb = b.shape();
            if sb != [g.o] {
                return Err(mismatch("conv2d bias", &sk, &sb));
            }
        }
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let value = Var::with_values(&parents, |v| conv_forward(v[0], v[1], v.get(2).copied(), &g));
        let has_bias = bias.is_some();
        self.tape
            .record("conv2d", vec![g.b, g.o, g.h, g.w], value, &parents, move |ctx| {
                let (x, k, dy) = (ctx.input(0), ctx.input(1), ctx.grad);
                let (hw, ckk) = (g.hw(), g.ckk());
                let need_x = ctx.needs(0);
                let need_k = ctx.needs(1);
                let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
                let mut gk = need_k.then(|| vec![T::zero(); k.len()]);
                let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { ckk * hw }];
                let mut dcols = vec![T::zero(); if g.pointwise() || !need_x { 0 } else { ckk * hw }];
                for bi in 0..g.b {
                    let xb = &x[bi * g.c * hw..(bi + 1) * g.c * hw];
                    let dyb = &dy[bi * g.o * hw..(bi + 1) * g.o * hw];
                    if let Some(gk) = gk.as_mut() {
                        let cols_b: &[T] = if g.pointwise() {
                            xb
                        } else {
                            im2col(xb, &g, &mut cols);
                            &cols
                        };
                        gemm(g.o, hw, ckk, dyb, false, cols_b, true, T::one(), gk);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxb = &mut gx[bi * g.c * hw..(bi + 1) * g.c * hw];
                        if g.pointwise() {
                            gemm(ckk, g.o, hw, k, true, dyb, false, T::zero(), gxb);
                        } else {
                            gemm(ckk, g.o, hw, k, true, dyb, false, T::zero(), &mut dcols);
                            col2im(&dcols, &g, gxb);
                        }
                    }
                }
                let mut out = vec![gx, gk];
                if has_bias {
                    let gb = ctx.needs(2).then(|| {
                        let mut gb = vec![T::zero(); g.o];
                        for (i, plane) in dy.chunks_exact(hw).enumerate() {
                            gb[i % g.o] += plane.iter().copied().sum::<T>();
                        }
                        gb
                    });
                    out.push(gb);
                }
                out
            })
    }
}

fn conv_forward<T: Real>(x: &[T], k: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (hw, ckk) = (g.hw(), g.ckk());
    let mut out = vec![T::zero(); g.b * g.o * hw];
    let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { ckk * hw }];
    for bi in 0..g.b {
        let xb = &x[bi * g.c * hw..(bi + 1) * g.c * hw];
        let ob = &mut out[bi * g.o * hw..(bi + 1) * g.o * hw];
        if let Some(bias) = bias {
            for (o, plane) in ob.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.pointwise() {
            gemm(g.o, ckk, hw, k, false, xb, false, beta, ob);
        } else {
            im2col(xb, g, &mut cols);
            gemm(g.o, ckk, hw, k, false, &cols, false, beta, ob);
        }
    }
    out
}
