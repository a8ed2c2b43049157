//! Fourier-domain channel mixing, the core of an FNO layer.
//!
//! The forward map is `x → G(W ⊙ F(x))` where `F` is the 2D DFT restricted
//! to the retained low modes (rows with |k_z| < mz, columns 0..mx of the
//! half spectrum) and `G` is the real inverse transform that treats the
//! half spectrum as Hermitian. The backward rules are the exact adjoints of
//! those real-linear maps, so finite differences agree to rounding.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, mismatch, AdError, Result};
use crate::real::Real;
use crate::tape::Var;

/// Retained mode counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modes {
    /// |k_z| < mz along the first spatial axis.
    pub mz: usize,
    /// Columns 0..mx of the half spectrum along the second axis.
    pub mx: usize,
}

impl Modes {
    /// Number of weight rows: every row index k with min(k, h-k) < mz.
    pub fn rows(&self, h: usize) -> usize {
        (2 * self.mz).saturating_sub(1).min(h)
    }

    /// Weight shape `[O, C, rows, mx, 2]` (re, im) for grid height `h`.
    pub fn weight_shape(&self, out_ch: usize, in_ch: usize, h: usize) -> [usize; 5] {
        [out_ch, in_ch, self.rows(h), self.mx, 2]
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.mz == 0 || self.mx == 0 || self.mz > h / 2 + 1 || self.mx > w / 2 + 1 {
            return Err(invalid(
                "spectral_multiply",
                format!(
                    "modes ({}, {}) exceed grid {h}x{w} (max ({}, {}))",
                    self.mz,
                    self.mx,
                    h / 2 + 1,
                    w / 2 + 1
                ),
            ));
        }
        Ok(())
    }

    /// Spectrum row index for weight row `r`.
    fn row_index(&self, r: usize, h: usize) -> usize {
        let rows = self.rows(h);
        if rows == h || r < self.mz {
            r
        } else {
            h - (rows - r)
        }
    }
}

/// Planned 2D complex FFTs for an `h×w` grid.
pub(crate) struct Fft2<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    /// Unnormalized in-place 2D transform of a row-major `h×w` buffer.
    pub(crate) fn process(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut t = vec![Complex::new(T::zero(), T::zero()); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        cols.process(&mut t);
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = t[x * h + y];
            }
        }
    }
}

/// Weight on column `l` of the half spectrum when folding back to real.
fn column_weight(l: usize, w: usize) -> usize {
    if l == 0 || (w % 2 == 0 && l == w / 2) {
        1
    } else {
        2
    }
}

struct SpecGeom {
    o: usize,
    h: usize,
    w: usize,
    modes: Modes,
    rows: usize,
}

impl SpecGeom {
    fn nm(&self) -> usize {
        self.rows * self.modes.mx
    }
    /// (flat spectrum index, column) for each retained mode, in weight order.
    fn mode_index(&self) -> Vec<(usize, usize)> {
        let mut idx = Vec::with_capacity(self.nm());
        for r in 0..self.rows {
            let k = self.modes.row_index(r, self.h);
            for l in 0..self.modes.mx {
                idx.push((k * self.w + l, l));
            }
        }
        idx
    }
}

/// Retained spectra `[n_planes, nm]` of real planes `[n_planes, h, w]`.
fn analyze<T: Real>(x: &[T], g: &SpecGeom, fft: &Fft2<T>, idx: &[(usize, usize)]) -> Vec<Complex<T>> {
    let hw = g.h * g.w;
    let planes = x.len() / hw;
    let mut out = Vec::with_capacity(planes * idx.len());
    let mut buf = vec![Complex::new(T::zero(), T::zero()); hw];
    for p in 0..planes {
        for (b, &v) in buf.iter_mut().zip(&x[p * hw..(p + 1) * hw]) {
            *b = Complex::new(v, T::zero());
        }
        fft.process(&mut buf, false);
        out.extend(idx.iter().map(|&(f, _)| buf[f]));
    }
    out
}

/// `y = (1/hw) Σ c_l Re(Y e^{iθ})` for retained modes `spec [nm]`.
fn synthesize<T: Real>(
    spec: &[Complex<T>],
    g: &SpecGeom,
    fft: &Fft2<T>,
    idx: &[(usize, usize)],
    buf: &mut [Complex<T>],
    out: &mut [T],
) {
    let (h, w) = (g.h, g.w);
    buf.fill(Complex::new(T::zero(), T::zero()));
    let half = T::lit(0.5);
    for (&(f, l), &v) in idx.iter().zip(spec) {
        let k = f / w;
        let val = v * (half * T::lit(column_weight(l, w) as f64));
        buf[f] += val;
        let kc = (h - k) % h;
        let lc = (w - l) % w;
        buf[kc * w + lc] += val.conj();
    }
    fft.process(buf, true);
    let norm = T::one() / T::lit((h * w) as f64);
    for (o, b) in out.iter_mut().zip(buf.iter()) {
        *o = b.re * norm;
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Fourier-domain linear mixing of `x:[B,C,H,W]` with complex weights
    /// `w:[O,C,rows,mx,2]` on the retained low modes → `[B,O,H,W]`.
    pub fn spectral_multiply(self, weights: Var<'t, T>, modes: Modes) -> Result<Var<'t, T>> {
        if !self.same_tape(&weights) {
            return Err(AdError::ForeignTape);
        }
        let (sx, sw) = (self.shape(), weights.shape());
        if sx.len() != 4 {
            return Err(mismatch("spectral_multiply", &sx, &sw));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        modes.validate(h, w)?;
        if sw.len() != 5 || sw[1] != c || sw[2..] != modes.weight_shape(sw[0], c, h)[2..] {
            return Err(mismatch("spectral_multiply", &sx, &sw));
        }
        let g = SpecGeom {
            o: sw[0],
            h,
            w,
            modes,
            rows: modes.rows(h),
        };
        let fft = Arc::new(Fft2::<T>::new(h, w));
        let idx = Arc::new(g.mode_index());
        let nm = g.nm();

        let (xs, value) = Var::with_values(&[self, weights], |v| {
            let xs = analyze(v[0], &g, &fft, &idx);
            let wt = v[1];
            let mut value = vec![T::zero(); b * g.o * h * w];
            let mut mixed = vec![Complex::new(T::zero(), T::zero()); nm];
            let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
            for bi in 0..b {
                for o in 0..g.o {
                    mixed.fill(Complex::new(T::zero(), T::zero()));
                    for ci in 0..c {
                        let xc = &xs[(bi * c + ci) * nm..][..nm];
                        let wc = &wt[(o * c + ci) * nm * 2..][..nm * 2];
                        for m in 0..nm {
                            mixed[m] += Complex::new(wc[2 * m], wc[2 * m + 1]) * xc[m];
                        }
                    }
                    let out = &mut value[(bi * g.o + o) * h * w..][..h * w];
                    synthesize(&mixed, &g, &fft, &idx, &mut buf, out);
                }
            }
            (xs, value)
        });

        self.tape
            .record("spectral_multiply", vec![b, g.o, h, w], value, &[self, weights], move |ctx| {
                let wt = ctx.input(1);
                let hw = h * w;
                let norm = T::one() / T::lit(hw as f64);
                // gY = (c_l / hw) · FFT2(gy) on the retained modes.
                let mut gys = analyze(ctx.grad, &g, &fft, &idx);
                for plane in gys.chunks_exact_mut(nm) {
                    for (v, &(_, l)) in plane.iter_mut().zip(idx.iter()) {
                        *v = *v * (norm * T::lit(column_weight(l, w) as f64));
                    }
                }
                let gw = ctx.needs(1).then(|| {
                    let mut gw = vec![T::zero(); wt.len()];
                    for bi in 0..b {
                        for o in 0..g.o {
                            let gy = &gys[(bi * g.o + o) * nm..][..nm];
                            for ci in 0..c {
                                let xc = &xs[(bi * c + ci) * nm..][..nm];
                                let gwc = &mut gw[(o * c + ci) * nm * 2..][..nm * 2];
                                for m in 0..nm {
                                    let z = gy[m] * xc[m].conj();
                                    gwc[2 * m] += z.re;
                                    gwc[2 * m + 1] += z.im;
                                }
                            }
                        }
                    }
                    gw
                });
                let gx = ctx.needs(0).then(|| {
                    let mut gx = vec![T::zero(); b * c * hw];
                    let mut gxs = vec![Complex::new(T::zero(), T::zero()); nm];
                    let mut buf = vec![Complex::new(T::zero(), T::zero()); hw];
                    for bi in 0..b {
                        for ci in 0..c {
                            gxs.fill(Complex::new(T::zero(), T::zero()));
                            for o in 0..g.o {
                                let gy = &gys[(bi * g.o + o) * nm..][..nm];
                                let wc = &wt[(o * c + ci) * nm * 2..][..nm * 2];
                                for m in 0..nm {
                                    gxs[m] += Complex::new(wc[2 * m], -wc[2 * m + 1]) * gy[m];
                                }
                            }
                            // gx = Re(IDFT_unnormalized(zero-padded gX)).
                            buf.fill(Complex::new(T::zero(), T::zero()));
                            for (&(f, _), &v) in idx.iter().zip(&gxs) {
                                buf[f] += v;
                            }
                            fft.process(&mut buf, true);
                            let out = &mut gx[(bi * c + ci) * hw..][..hw];
                            for (o, v) in out.iter_mut().zip(&buf) {
                                *o = v.re;
                            }
                        }
                    }
                    gx
                });
                vec![gx, gw]
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use std::f64::consts::PI;

    fn identity_weights(ch: usize, rows: usize, mx: usize, scale: f64) -> Vec<f64> {
        let mut w = vec![0.0; ch * ch * rows * mx * 2];
        for o in 0..ch {
            for m in 0..rows * mx {
                w[((o * ch + o) * rows * mx + m) * 2] = scale;
            }
        }
        w
    }

    #[test]
    fn full_band_identity_reproduces_input() {
        let (h, w) = (8, 12);
        let modes = Modes { mz: h / 2 + 1, mx: w / 2 + 1 };
        let tape = Tape::<f64>::new();
        let xv: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37) % 17) as f64 * 0.1 - 0.8).collect();
        let x = tape.constant(&[1, 2, h, w], xv.clone()).unwrap();
        let shape = modes.weight_shape(2, 2, h);
        let wt = tape.constant(&shape, identity_weights(2, shape[2], shape[3], 1.0)).unwrap();
        let y = x.spectral_multiply(wt, modes).unwrap().to_vec();
        for (a, b) in y.iter().zip(&xv) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn pure_tone_is_an_eigenfunction() {
        let (h, w) = (16, 16);
        let modes = Modes { mz: 4, mx: 5 };
        let tape = Tape::<f64>::new();
        let tone: Vec<f64> = (0..h * w)
            .map(|i| {
                let (z, x) = ((i / w) as f64, (i % w) as f64);
                (2.0 * PI * (2.0 * z / h as f64 + 3.0 * x / w as f64)).cos()
            })
            .collect();
        let x = tape.constant(&[1, 1, h, w], tone.clone()).unwrap();
        let shape = modes.weight_shape(1, 1, h);
        let mut wv = vec![0.0; shape.iter().product()];
        // Row for k_z = 2 is weight row 2; column 3.
        wv[(2 * modes.mx + 3) * 2] = 2.0;
        let wt = tape.constant(&shape, wv).unwrap();
        let y = x.spectral_multiply(wt, modes).unwrap().to_vec();
        for (a, b) in y.iter().zip(&tone) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_modes_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&[1, 1, 8, 8], vec![0.0; 64]).unwrap();
        let modes = Modes { mz: 6, mx: 2 };
        let wt = tape.constant(&[1, 1, 8, 2, 2], vec![0.0; 32]).unwrap();
        assert!(x.spectral_multiply(wt, modes).is_err());
    }

    #[test]
    fn row_index_maps_negative_frequencies_to_the_bottom() {
        let m = Modes { mz: 3, mx: 2 };
        let rows: Vec<usize> = (0..m.rows(10)).map(|r| m.row_index(r, 10)).collect();
        assert_eq!(rows, vec![0, 1, 2, 8, 9]);
    }
}
