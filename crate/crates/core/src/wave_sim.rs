//! 2D constant-density acoustic modelling and time-lag reverse time migration.
//!
//! The propagator solves `p_tt = v²∇²p + v²f` with a fourth-order Laplacian
//! and second-order leapfrog in time on a grid padded by a Cerjan sponge.
//! Sample `n` of every trace and snapshot is the field at `t = n·dt`.
//!
//! Imaging uses `R(r, τ) = Σ_t p⁺(r, t+τ) p⁻(r, t−τ) dt` evaluated on
//! snapshots decimated by `image_stride`, rewritten as
//! `Σ_s p⁺(r, s+2τ) p⁻(r, s)`.

use rayon::prelude::*;

use crate::domain::{AcquisitionGeometry, ExtendedImageVolume, Grid2D, ShotGather, VelocityField};
use crate::error::{invalid, Error, Result};

/// Fourth-order second-derivative stencil.
const C0: f32 = -5.0 / 2.0;
const C1: f32 = 4.0 / 3.0;
const C2: f32 = -1.0 / 12.0;

const CFL_FACTOR: f64 = 0.5;
const MIN_POINTS_PER_WAVELENGTH: f64 = 5.0;
const BLOWUP_CHECK_EVERY: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub nt: usize,
    pub dt: f64,
    pub f_peak: f64,
    pub halo: usize,
    pub taper_strength: f64,
    /// Snapshot decimation for imaging, in time steps.
    pub image_stride: usize,
    /// Rows below the top of the stacked image tapered to zero, removing
    /// the acquisition footprint. 0 disables.
    pub top_mute: usize,
    /// Zero the residual data up to two periods after the direct arrival.
    pub direct_mute: bool,
    /// Apply `−∂²/∂z²` to the stacked image, suppressing low-wavenumber
    /// backscatter.
    pub vertical_filter: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nt: 1000,
            dt: 1e-3,
            f_peak: 20.0,
            halo: 20,
            taper_strength: 0.015,
            image_stride: 4,
            top_mute: 10,
            direct_mute: true,
            vertical_filter: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nt < 2 || !(self.dt > 0.0) || !(self.f_peak > 0.0) {
            return Err(invalid("simulation config", format!("{self:?}")));
        }
        if self.halo < 10 {
            return Err(invalid("simulation config", format!("halo {} < 10 cells", self.halo)));
        }
        if self.image_stride == 0 {
            return Err(invalid("simulation config", "image_stride must be ≥ 1"));
        }
        Ok(())
    }

    /// Stability and dispersion limits for a given model.
    pub fn check_model(&self, v: &VelocityField) -> Result<()> {
        self.validate()?;
        let g = &v.grid;
        let bound = CFL_FACTOR * g.dz.min(g.dx) / v.max() as f64;
        if self.dt > bound {
            return Err(Error::Cfl { dt: self.dt, bound });
        }
        let ppw = v.min() as f64 / (self.f_peak * g.dz.max(g.dx));
        if ppw < MIN_POINTS_PER_WAVELENGTH {
            return Err(invalid(
                "simulation config",
                format!("{ppw:.2} points per wavelength at f_peak {} Hz (need ≥ 5)", self.f_peak),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagAxis {
    pub n_lag: usize,
    pub d_tau: f64,
}

impl Default for LagAxis {
    fn default() -> Self {
        Self { n_lag: 3, d_tau: 8e-3 }
    }
}

impl LagAxis {
    pub fn zero_lag() -> Self {
        Self { n_lag: 1, d_tau: 8e-3 }
    }

    /// Lag spacing in time steps; validates the axis against `cfg`.
    pub fn steps(&self, cfg: &SimConfig) -> Result<usize> {
        if self.n_lag % 2 == 0 {
            return Err(invalid("lag axis", format!("n_lag = {} must be odd", self.n_lag)));
        }
        if self.n_lag == 1 {
            return Ok(0);
        }
        let ratio = self.d_tau / cfg.dt;
        let l = ratio.round();
        if l < 1.0 || (ratio - l).abs() > 1e-6 * ratio {
            return Err(invalid("lag axis", format!("d_tau = {} is not a multiple of dt = {}", self.d_tau, cfg.dt)));
        }
        let l = l as usize;
        if (2 * l) % cfg.image_stride != 0 {
            return Err(invalid(
                "lag axis",
                format!("2·d_tau/dt = {} is not a multiple of image_stride {}", 2 * l, cfg.image_stride),
            ));
        }
        Ok(l)
    }
}

/// `(1 − 2π²f²(t−t0)²)·exp(−π²f²(t−t0)²)` with `t0 = 1.5/f`.
pub fn ricker_wavelet(f_peak: f64, nt: usize, dt: f64) -> Result<Vec<f32>> {
    if !(f_peak > 0.0) {
        return Err(invalid("wavelet", format!("f_peak = {f_peak}")));
    }
    let t0 = 1.5 / f_peak;
    let span = nt as f64 * dt;
    if span < 2.0 * t0 {
        return Err(Error::WaveletTruncated { span, need: 2.0 * t0 });
    }
    let a = (std::f64::consts::PI * f_peak).powi(2);
    Ok((0..nt)
        .map(|n| {
            let s = n as f64 * dt - t0;
            ((1.0 - 2.0 * a * s * s) * (-a * s * s).exp()) as f32
        })
        .collect())
}

/// Precomputed padded medium and sponge for one velocity model.
struct Propagator {
    nz: usize,
    nx: usize,
    halo: usize,
    nzp: usize,
    nxp: usize,
    /// `v²dt²` per padded cell.
    vdt2: Vec<f32>,
    taper_z: Vec<f32>,
    taper_x: Vec<f32>,
    inv_dz2: f32,
    inv_dx2: f32,
    /// Point-source normalization `1/(dz·dx)`.
    inv_cell: f32,
}

impl Propagator {
    fn new(v: &VelocityField, cfg: &SimConfig) -> Result<Self> {
        cfg.check_model(v)?;
        let Grid2D { nz, nx, dz, dx } = v.grid;
        let halo = cfg.halo;
        let (nzp, nxp) = (nz + 2 * halo, nx + 2 * halo);
        let mut vdt2 = vec![0.0f32; nzp * nxp];
        for i in 0..nzp {
            let iz = i.saturating_sub(halo).min(nz - 1);
            for j in 0..nxp {
                let ix = j.saturating_sub(halo).min(nx - 1);
                let c = v.at(iz, ix) as f64 * cfg.dt;
                vdt2[i * nxp + j] = (c * c) as f32;
            }
        }
        let taper = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|i| {
                    let d = if i < halo {
                        halo - i
                    } else if i >= n - halo {
                        i + 1 - (n - halo)
                    } else {
                        0
                    };
                    (-(cfg.taper_strength * d as f64).powi(2)).exp() as f32
                })
                .collect()
        };
        Ok(Self {
            nz,
            nx,
            halo,
            nzp,
            nxp,
            vdt2,
            taper_z: taper(nzp),
            taper_x: taper(nxp),
            inv_dz2: (1.0 / (dz * dz)) as f32,
            inv_dx2: (1.0 / (dx * dx)) as f32,
            inv_cell: (1.0 / (dz * dx)) as f32,
        })
    }

    fn padded(&self, (iz, ix): (usize, usize)) -> usize {
        (iz + self.halo) * self.nxp + ix + self.halo
    }

    /// `prev ← 2·cur − prev + v²dt²∇²cur`, then sponge on both buffers.
    fn step(&self, prev: &mut [f32], cur: &mut [f32]) {
        let w = self.nxp;
        let (iz2, ix2) = (self.inv_dz2, self.inv_dx2);
        for i in 2..self.nzp - 2 {
            let r = i * w;
            let up2 = &cur[r - 2 * w..r - w];
            let up1 = &cur[r - w..r];
            let row = &cur[r..r + w];
            let dn1 = &cur[r + w..r + 2 * w];
            let dn2 = &cur[r + 2 * w..r + 3 * w];
            let vrow = &self.vdt2[r..r + w];
            let out = &mut prev[r..r + w];
            for j in 2..w - 2 {
                let c = row[j];
                let lz = C0 * c + C1 * (up1[j] + dn1[j]) + C2 * (up2[j] + dn2[j]);
                let lx = C0 * c + C1 * (row[j - 1] + row[j + 1]) + C2 * (row[j - 2] + row[j + 2]);
                out[j] = 2.0 * c - out[j] + vrow[j] * (lz * iz2 + lx * ix2);
            }
        }
        self.sponge(prev);
        self.sponge(cur);
    }

    fn sponge(&self, p: &mut [f32]) {
        let (h, w) = (self.halo, self.nxp);
        for i in 0..self.nzp {
            let row = &mut p[i * w..(i + 1) * w];
            let tz = self.taper_z[i];
            if i < h || i >= self.nzp - h {
                row.iter_mut().zip(&self.taper_x).for_each(|(v, &tx)| *v *= tz * tx);
            } else {
                for j in (0..h).chain(w - h..w) {
                    row[j] *= self.taper_x[j];
                }
            }
        }
    }

    fn interior(&self, p: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.nz * self.nx);
        for iz in 0..self.nz {
            let r = (iz + self.halo) * self.nxp + self.halo;
            out.extend_from_slice(&p[r..r + self.nx]);
        }
        out
    }

    /// Runs `nt` steps from rest. `injections` are (padded index, per-step
    /// source samples); `record` are padded indices sampled every step.
    /// Returns the recorded traces `[n_record, nt]` and, when `stride` is
    /// set, interior snapshots at every `stride`-th step.
    fn run(
        &self,
        nt: usize,
        injections: &[(usize, &[f32])],
        record: &[usize],
        stride: Option<usize>,
        mut on_snapshot: impl FnMut(usize, &[f32]),
    ) -> Result<Vec<f32>> {
        let n = self.nzp * self.nxp;
        let (mut prev, mut cur) = (vec![0.0f32; n], vec![0.0f32; n]);
        let mut traces = vec![0.0f32; record.len() * nt];
        for step in 0..nt {
            for (r, &k) in record.iter().enumerate() {
                traces[r * nt + step] = cur[k];
            }
            if let Some(s) = stride {
                if step % s == 0 {
                    on_snapshot(step, &self.interior(&cur));
                }
            }
            self.step(&mut prev, &mut cur);
            for &(k, src) in injections {
                prev[k] += self.vdt2[k] * self.inv_cell * src[step];
            }
            std::mem::swap(&mut prev, &mut cur);
            if step % BLOWUP_CHECK_EVERY == 0 || step + 1 == nt {
                if cur.iter().any(|v| !v.is_finite() || v.abs() > 1e20) {
                    return Err(Error::BlowUp { step });
                }
            }
        }
        Ok(traces)
    }
}

/// Decimated interior snapshots `frames[k]` at time step `k·stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshots {
    pub stride: usize,
    pub nz: usize,
    pub nx: usize,
    pub frames: Vec<Vec<f32>>,
}

impl Snapshots {
    fn new(stride: usize, nz: usize, nx: usize, nt: usize) -> Self {
        Self {
            stride,
            nz,
            nx,
            frames: Vec::with_capacity(nt.div_ceil(stride)),
        }
    }
}

fn check_grid(a: &VelocityField, b: &VelocityField) -> Result<()> {
    if !a.grid.same_shape(&b.grid) || a.grid.dz != b.grid.dz || a.grid.dx != b.grid.dx {
        return Err(invalid("grids", format!("{:?} vs {:?}", a.grid, b.grid)));
    }
    Ok(())
}

/// Forward modelling of source `src` of `geom`: receiver gather plus the
/// decimated source wavefield.
pub fn simulate_shot(
    v: &VelocityField,
    geom: &AcquisitionGeometry,
    src: usize,
    cfg: &SimConfig,
) -> Result<(ShotGather, Snapshots)> {
    geom.validate(&v.grid)?;
    let &pos = geom
        .sources
        .get(src)
        .ok_or_else(|| invalid("geometry", format!("source index {src} of {}", geom.sources.len())))?;
    let prop = Propagator::new(v, cfg)?;
    let wavelet = ricker_wavelet(cfg.f_peak, cfg.nt, cfg.dt)?;
    let record: Vec<usize> = geom.receivers.iter().map(|&r| prop.padded(r)).collect();
    let mut snaps = Snapshots::new(cfg.image_stride, v.grid.nz, v.grid.nx, cfg.nt);
    let traces = prop.run(
        cfg.nt,
        &[(prop.padded(pos), &wavelet)],
        &record,
        Some(cfg.image_stride),
        |_, f| snaps.frames.push(f.to_vec()),
    )?;
    let gather = ShotGather {
        nt: cfg.nt,
        dt: cfg.dt,
        n_rec: geom.receivers.len(),
        traces,
    };
    Ok((gather, snaps))
}

/// Receiver wavefield: time-reversed traces injected at the receivers and
/// propagated in `v_mig`. Frame `k` is the field at time step `k·stride`.
pub fn receiver_wavefield(
    v_mig: &VelocityField,
    gather: &ShotGather,
    geom: &AcquisitionGeometry,
    cfg: &SimConfig,
) -> Result<Snapshots> {
    geom.validate(&v_mig.grid)?;
    if gather.n_rec != geom.receivers.len() || gather.nt != cfg.nt || (gather.dt - cfg.dt).abs() > 1e-12 * cfg.dt {
        return Err(invalid(
            "gather",
            format!(
                "{} receivers × {} samples at dt {} vs geometry {} receivers, config {} samples at dt {}",
                gather.n_rec,
                gather.nt,
                gather.dt,
                geom.receivers.len(),
                cfg.nt,
                cfg.dt
            ),
        ));
    }
    let prop = Propagator::new(v_mig, cfg)?;
    let nt = cfg.nt;
    let reversed: Vec<Vec<f32>> = (0..gather.n_rec)
        .map(|r| gather.trace(r).iter().rev().copied().collect())
        .collect();
    let injections: Vec<(usize, &[f32])> = geom
        .receivers
        .iter()
        .zip(&reversed)
        .map(|(&p, t)| (prop.padded(p), t.as_slice()))
        .collect();
    let stride = cfg.image_stride;
    let mut snaps = Snapshots::new(stride, v_mig.grid.nz, v_mig.grid.nx, nt);
    snaps.frames = vec![Vec::new(); nt.div_ceil(stride)];
    // Reverse step m is forward time nt−1−m; keep the frames on the grid.
    prop.run(nt, &injections, &[], Some(1), |m, f| {
        let t = nt - 1 - m;
        if t % stride == 0 {
            snaps.frames[t / stride] = f.to_vec();
        }
    })?;
    Ok(snaps)
}

/// `R[m] = Σ_k src[k + shift·(m − h)] · rcv[k] · weight`, lag-major.
/// Frames outside the recorded range count as zero.
pub fn lagged_crosscorrelation(src: &Snapshots, rcv: &Snapshots, n_lag: usize, shift: usize, weight: f64) -> Vec<f32> {
    let n = src.nz * src.nx;
    let h = (n_lag / 2) as isize;
    let nf = src.frames.len().min(rcv.frames.len()) as isize;
    let mut out = vec![0.0f32; n_lag * n];
    let mut acc = vec![0.0f64; n];
    for m in 0..n_lag {
        acc.fill(0.0);
        let off = shift as isize * (m as isize - h);
        for k in 0..nf {
            let ks = k + off;
            if ks < 0 || ks >= nf {
                continue;
            }
            let (a, b) = (&src.frames[ks as usize], &rcv.frames[k as usize]);
            for ((o, &x), &y) in acc.iter_mut().zip(a).zip(b) {
                *o += x as f64 * y as f64;
            }
        }
        for (o, a) in out[m * n..(m + 1) * n].iter_mut().zip(&acc) {
            *o = (a * weight) as f32;
        }
    }
    out
}

/// Single-shot extended image of `gather` with source wavefield `src`
/// (propagated in `v_mig`).
pub fn migrate_shot(
    v_mig: &VelocityField,
    gather: &ShotGather,
    src: &Snapshots,
    geom: &AcquisitionGeometry,
    lag: &LagAxis,
    cfg: &SimConfig,
) -> Result<ExtendedImageVolume> {
    let l = lag.steps(cfg)?;
    if src.stride != cfg.image_stride || src.nz != v_mig.grid.nz || src.nx != v_mig.grid.nx {
        return Err(invalid("source wavefield", "snapshot layout does not match the config/grid"));
    }
    let rcv = receiver_wavefield(v_mig, gather, geom, cfg)?;
    let shift = 2 * l / cfg.image_stride;
    let values = lagged_crosscorrelation(src, &rcv, lag.n_lag, shift, cfg.dt * cfg.image_stride as f64);
    Ok(ExtendedImageVolume {
        grid: v_mig.grid,
        n_lag: lag.n_lag,
        d_tau: lag.d_tau,
        values,
    })
}

/// Conventional `Σ_t p⁺(t)p⁻(t)dt` image, streamed during a fresh source
/// propagation against stored receiver frames.
pub fn zero_lag_image(
    v_mig: &VelocityField,
    gather: &ShotGather,
    geom: &AcquisitionGeometry,
    src: usize,
    cfg: &SimConfig,
) -> Result<Vec<f32>> {
    let rcv = receiver_wavefield(v_mig, gather, geom, cfg)?;
    let prop = Propagator::new(v_mig, cfg)?;
    let wavelet = ricker_wavelet(cfg.f_peak, cfg.nt, cfg.dt)?;
    let mut image = vec![0.0f64; v_mig.grid.len()];
    prop.run(cfg.nt, &[(prop.padded(geom.sources[src]), &wavelet)], &[], Some(cfg.image_stride), |t, f| {
        let r = &rcv.frames[t / cfg.image_stride];
        for (i, (&a, &b)) in f.iter().zip(r).enumerate() {
            image[i] += a as f64 * b as f64;
        }
    })?;
    let w = cfg.dt * cfg.image_stride as f64;
    Ok(image.into_iter().map(|x| (x * w) as f32).collect())
}

/// Extended image of one shot: data modelled in `v_true`, migrated in
/// `v_mig`. The direct wave is removed by subtracting the data modelled in
/// `v_mig`, which comes for free with the source wavefield, and optionally
/// by muting what remains around the direct arrival.
pub fn image_shot(
    v_true: &VelocityField,
    v_mig: &VelocityField,
    geom: &AcquisitionGeometry,
    src: usize,
    lag: &LagAxis,
    cfg: &SimConfig,
) -> Result<ExtendedImageVolume> {
    let observed = model_gather(v_true, geom, src, cfg)?;
    image_observed_shot(v_mig, &observed, geom, src, lag, cfg)
}

/// As [`image_shot`] for a recorded gather.
pub fn image_observed_shot(
    v_mig: &VelocityField,
    observed: &ShotGather,
    geom: &AcquisitionGeometry,
    src: usize,
    lag: &LagAxis,
    cfg: &SimConfig,
) -> Result<ExtendedImageVolume> {
    let (background, snaps) = simulate_shot(v_mig, geom, src, cfg)?;
    if observed.nt != background.nt || observed.n_rec != background.n_rec || observed.dt != background.dt {
        return Err(invalid(
            "gather",
            format!(
                "shot {src}: {}×{} samples at dt {} vs {}×{} at dt {}",
                observed.n_rec, observed.nt, observed.dt, background.n_rec, background.nt, background.dt
            ),
        ));
    }
    let mut residual = subtract(observed, &background);
    if cfg.direct_mute {
        let (z, x) = geom.sources[src];
        mute_direct_arrival(&mut residual, geom, src, v_mig.at(z, x) as f64, &v_mig.grid, cfg);
    }
    migrate_shot(v_mig, &residual, &snaps, geom, lag, cfg)
}

/// Zeroes each trace until `offset/v + 2/f_peak`, then ramps in with a sin²
/// taper over another `2/f_peak`.
pub fn mute_direct_arrival(
    gather: &mut ShotGather,
    geom: &AcquisitionGeometry,
    src: usize,
    v_surface: f64,
    grid: &crate::domain::Grid2D,
    cfg: &SimConfig,
) {
    let (sz, sx) = geom.sources[src];
    let period = 1.0 / cfg.f_peak;
    let nt = gather.nt;
    for (r, &(rz, rx)) in geom.receivers.iter().enumerate().take(gather.n_rec) {
        let dz = (rz as f64 - sz as f64) * grid.dz;
        let dx = (rx as f64 - sx as f64) * grid.dx;
        let start = dz.hypot(dx) / v_surface + 2.0 * period;
        let trace = &mut gather.traces[r * nt..(r + 1) * nt];
        for (n, x) in trace.iter_mut().enumerate() {
            let u = (n as f64 * gather.dt - start) / (2.0 * period);
            if u >= 1.0 {
                break;
            }
            *x *= if u <= 0.0 { 0.0 } else { (std::f64::consts::FRAC_PI_2 * u).sin().powi(2) as f32 };
        }
    }
}

/// Receiver gather only, without keeping snapshots.
pub fn model_gather(v: &VelocityField, geom: &AcquisitionGeometry, src: usize, cfg: &SimConfig) -> Result<ShotGather> {
    geom.validate(&v.grid)?;
    let &pos = geom
        .sources
        .get(src)
        .ok_or_else(|| invalid("geometry", format!("source index {src} of {}", geom.sources.len())))?;
    let prop = Propagator::new(v, cfg)?;
    let wavelet = ricker_wavelet(cfg.f_peak, cfg.nt, cfg.dt)?;
    let record: Vec<usize> = geom.receivers.iter().map(|&r| prop.padded(r)).collect();
    let traces = prop.run(cfg.nt, &[(prop.padded(pos), &wavelet)], &record, None, |_, _| {})?;
    Ok(ShotGather {
        nt: cfg.nt,
        dt: cfg.dt,
        n_rec: geom.receivers.len(),
        traces,
    })
}

pub fn subtract(a: &ShotGather, b: &ShotGather) -> ShotGather {
    ShotGather {
        traces: a.traces.iter().zip(&b.traces).map(|(x, y)| x - y).collect(),
        ..a.clone()
    }
}

/// Stack of [`image_shot`] over every source. Shots run in parallel; the
/// stack is summed in source order.
pub fn model_and_migrate(
    v_true: &VelocityField,
    v_mig: &VelocityField,
    geom: &AcquisitionGeometry,
    lag: &LagAxis,
    cfg: &SimConfig,
) -> Result<ExtendedImageVolume> {
    check_grid(v_true, v_mig)?;
    lag.steps(cfg)?;
    let shots = (0..geom.sources.len())
        .into_par_iter()
        .map(|s| image_shot(v_true, v_mig, geom, s, lag, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(finish_stack(v_mig.grid, &shots, lag, cfg))
}

fn finish_stack(grid: Grid2D, shots: &[ExtendedImageVolume], lag: &LagAxis, cfg: &SimConfig) -> ExtendedImageVolume {
    let mut stack = ExtendedImageVolume::zeros(grid, lag.n_lag, lag.d_tau);
    for shot in shots {
        stack.values.iter_mut().zip(&shot.values).for_each(|(a, b)| *a += b);
    }
    if cfg.vertical_filter {
        vertical_second_derivative(&mut stack);
    }
    apply_top_mute(&mut stack, cfg.top_mute);
    stack
}

/// Stacked extended image of recorded gathers, one per source in order,
/// processed exactly like the modelled data of [`model_and_migrate`].
pub fn migrate_gathers(
    v_mig: &VelocityField,
    gathers: &[ShotGather],
    geom: &AcquisitionGeometry,
    lag: &LagAxis,
    cfg: &SimConfig,
) -> Result<ExtendedImageVolume> {
    if gathers.len() != geom.sources.len() {
        return Err(invalid("gathers", format!("{} gathers for {} sources", gathers.len(), geom.sources.len())));
    }
    lag.steps(cfg)?;
    let shots = (0..gathers.len())
        .into_par_iter()
        .map(|s| image_observed_shot(v_mig, &gathers[s], geom, s, lag, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(finish_stack(v_mig.grid, &shots, lag, cfg))
}

/// Replaces every lag panel by its negated second depth difference in grid
/// units, with replicated edge rows. The lateral term of a full Laplacian
/// mostly amplifies source-sampling noise.
pub fn vertical_second_derivative(img: &mut ExtendedImageVolume) {
    let (nz, nx) = (img.grid.nz, img.grid.nx);
    for panel in img.values.chunks_exact_mut(nz * nx) {
        let src = panel.to_vec();
        for iz in 0..nz {
            let (up, down) = (iz.saturating_sub(1), (iz + 1).min(nz - 1));
            for ix in 0..nx {
                panel[iz * nx + ix] = 2.0 * src[iz * nx + ix] - src[up * nx + ix] - src[down * nx + ix];
            }
        }
    }
}

/// Multiplies row `iz < rows` of every lag by `sin²(π·iz / 2·rows)`.
pub fn apply_top_mute(img: &mut ExtendedImageVolume, rows: usize) {
    let (nz, nx) = (img.grid.nz, img.grid.nx);
    for lag in img.values.chunks_exact_mut(nz * nx) {
        for iz in 0..rows.min(nz) {
            let w = (std::f64::consts::FRAC_PI_2 * iz as f64 / rows as f64).sin().powi(2) as f32;
            lag[iz * nx..(iz + 1) * nx].iter_mut().for_each(|v| *v *= w);
        }
    }
}

/// Per-step energy of a single-source run in `v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyHistory {
    /// `Σp²` over the unpadded grid.
    pub interior_sum_sq: Vec<f64>,
    /// `Σp²` over the padded grid.
    pub padded_sum_sq: Vec<f64>,
    /// Leapfrog energy `Σ(pⁿ⁺¹−pⁿ)²/(v²dt²) − Σpⁿ⁺¹·∇²pⁿ` over the padded
    /// grid, conserved by the scheme in the absence of the sponge.
    pub discrete: Vec<f64>,
}

pub fn energy_history(v: &VelocityField, source: (usize, usize), cfg: &SimConfig) -> Result<EnergyHistory> {
    let prop = Propagator::new(v, cfg)?;
    let wavelet = ricker_wavelet(cfg.f_peak, cfg.nt, cfg.dt)?;
    let k_src = prop.padded(source);
    let n = prop.nzp * prop.nxp;
    let (mut prev, mut cur) = (vec![0.0f32; n], vec![0.0f32; n]);
    let mut h = EnergyHistory::default();
    let w = prop.nxp;
    for step in 0..cfg.nt {
        prop.step(&mut prev, &mut cur);
        prev[k_src] += prop.vdt2[k_src] * prop.inv_cell * wavelet[step];
        // prev = pⁿ⁺¹, cur = pⁿ
        let mut e = 0.0f64;
        for i in 2..prop.nzp - 2 {
            for j in 2..w - 2 {
                let k = i * w + j;
                let c = cur[k];
                let lz = C0 * c + C1 * (cur[k - w] + cur[k + w]) + C2 * (cur[k - 2 * w] + cur[k + 2 * w]);
                let lx = C0 * c + C1 * (cur[k - 1] + cur[k + 1]) + C2 * (cur[k - 2] + cur[k + 2]);
                let lap = (lz * prop.inv_dz2 + lx * prop.inv_dx2) as f64;
                let dp = (prev[k] - c) as f64;
                e += dp * dp / prop.vdt2[k] as f64 - prev[k] as f64 * lap;
            }
        }
        h.discrete.push(e);
        std::mem::swap(&mut prev, &mut cur);
        h.padded_sum_sq.push(cur.iter().map(|&x| x as f64 * x as f64).sum());
        h.interior_sum_sq.push(prop.interior(&cur).iter().map(|&x| x as f64 * x as f64).sum());
        if !e.is_finite() {
            return Err(Error::BlowUp { step });
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nz: usize, nx: usize) -> Grid2D {
        Grid2D::new(nz, nx, 10.0, 10.0).unwrap()
    }

    #[test]
    fn ricker_center_and_zero_crossings() {
        let (f, dt) = (20.0, 1e-4);
        let w = ricker_wavelet(f, 2000, dt).unwrap();
        let t0 = 1.5 / f;
        assert_eq!(w[(t0 / dt).round() as usize], 1.0);
        let tz = t0 + 1.0 / (2f64.sqrt() * std::f64::consts::PI * f);
        let k = (tz / dt).floor() as usize;
        assert!(w[k] > 0.0 && w[k + 1] < 0.0, "{} {}", w[k], w[k + 1]);
        assert!(matches!(ricker_wavelet(20.0, 100, 1e-3), Err(Error::WaveletTruncated { .. })));
    }

    #[test]
    fn ricker_spectrum_peaks_at_f_peak() {
        let (f, nt, dt) = (20.0, 1000, 1e-3);
        let w = ricker_wavelet(f, nt, dt).unwrap();
        let p: Vec<f64> = w.iter().map(|&x| x as f64).collect();
        let s = crate::domain::profile_spectrum(&p, dt);
        let peak = (0..s.amplitude.len()).max_by(|&a, &b| s.amplitude[a].total_cmp(&s.amplitude[b])).unwrap();
        let df = 1.0 / (nt as f64 * dt);
        assert!((peak as f64 * df - f).abs() <= df, "peak {} Hz", peak as f64 * df);
    }

    #[test]
    fn cfl_and_dispersion_guards() {
        let v = VelocityField::constant(grid(16, 16), 6000.0);
        let err = SimConfig::default().check_model(&v).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }), "{err}");
        let slow = VelocityField::constant(grid(16, 16), 500.0);
        assert!(SimConfig::default().check_model(&slow).is_err());
        assert!(SimConfig { halo: 5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn lag_axis_validation() {
        let cfg = SimConfig::default();
        assert_eq!(LagAxis::default().steps(&cfg).unwrap(), 8);
        assert!(LagAxis { n_lag: 2, d_tau: 8e-3 }.steps(&cfg).is_err());
        assert!(LagAxis { n_lag: 3, d_tau: 7.5e-3 }.steps(&cfg).is_err());
        assert!(LagAxis { n_lag: 3, d_tau: 1e-3 }.steps(&cfg).is_err());
    }

    #[test]
    fn lag_zero_of_identical_wavefields_is_even() {
        let frames: Vec<Vec<f32>> = (0..20).map(|k| (0..6).map(|i| ((k * 7 + i * 3) % 11) as f32 - 5.0).collect()).collect();
        let s = Snapshots { stride: 1, nz: 2, nx: 3, frames };
        let r = lagged_crosscorrelation(&s, &s, 5, 2, 1.0);
        for i in 0..6 {
            assert_eq!(r[i], r[4 * 6 + i]);
            assert_eq!(r[6 + i], r[3 * 6 + i]);
        }
    }
}
