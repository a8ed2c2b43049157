//! Velocity inversion through a frozen surrogate.
//!
//! The iterate occupies the first input channel of the operator; the second
//! channel stays at the migration velocity. Each iteration minimizes
//! `‖G(v, v_mig) − I_obs‖²` (mean over the image) with Adam on `v` alone,
//! then clamps `v` to the normalized box. With a denoiser, every
//! `diffuse_every` iterations the iterate is replaced by its diffusion
//! refinement and the optimizer moments are cleared.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use vmb_autodiff::{Adam, AdamConfig, StepDecay, Tape};

use crate::ddpm::{refine_conditioned, NoisePredictor, NoiseSchedule};
use crate::domain::{profile_spectrum, ExtendedImageVolume, Grid2D, NormalizationSpec, Spectrum, VelocityField};
use crate::error::{invalid, Error, Result};
use crate::neural_op::{forward_graph, HybridOperatorModel};
use crate::nn::Bound;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionConfig {
    pub iterations: usize,
    /// `0.01 · 0.8^⌊i/100⌋` by default.
    pub lr: StepDecay,
    /// Refinement cadence in iterations; 0 disables the denoiser.
    pub diffuse_every: usize,
    pub s_cond: usize,
    pub k_steps: usize,
    /// Normalized velocity box.
    pub bounds: (f32, f32),
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: StepDecay { base: 0.01, factor: 0.8, every: 100 },
            diffuse_every: 10,
            s_cond: 50,
            k_steps: 1,
            bounds: (0.0, 1.0),
            seed: 21,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.lr;
        if self.iterations == 0
            || !(d.base > 0.0)
            || !(d.factor > 0.0 && d.factor <= 1.0)
            || d.every == 0
            || self.k_steps == 0
            || !(self.bounds.0 < self.bounds.1)
        {
            return Err(invalid("inversion config", format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    /// The iterate was replaced by a diffusion refinement after this step.
    pub refined: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub velocity: VelocityField,
    /// Final iterate in normalized units.
    pub normalized: Vec<f32>,
    pub history: Vec<IterRecord>,
}

impl InversionResult {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iter,loss,lr,refined\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{:e},{:e},{}", r.iter, r.loss, r.lr, u8::from(r.refined));
        }
        s
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.loss_csv()).map_err(|e| Error::io(path, e))
    }
}

/// The denoiser and schedule used for refinement.
#[derive(Clone, Copy)]
pub struct Prior<'a> {
    pub denoiser: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
}

/// Loss and gradient with respect to the first input channel.
pub fn inversion_loss(
    model: &HybridOperatorModel,
    v: &[f32],
    v_mig: &[f32],
    target: &[f32],
) -> Result<(f64, Vec<f32>)> {
    let g = model.arch.grid;
    let tape = Tape::<f32>::new();
    let p = Bound::new(&model.params, model.params.bind_frozen(&tape));
    let x = tape.var(&[1, 1, g.nz, g.nx], v.to_vec())?;
    let m = tape.constant(&[1, 1, g.nz, g.nx], v_mig.to_vec())?;
    let y = tape.constant(&[1, model.arch.n_lag(), g.nz, g.nx], target.to_vec())?;
    let loss = forward_graph(&model.arch, &p, x.concat_channels(m)?)?.mse(y)?;
    let value = loss.item() as f64;
    let grads = tape.backward(loss)?;
    let grad = grads.get(x).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
    Ok((value, grad))
}

fn check_inputs(model: &HybridOperatorModel, v_mig: &VelocityField, i_obs: &ExtendedImageVolume) -> Result<()> {
    let g = model.arch.grid;
    if !g.same_shape(&v_mig.grid) || !g.same_shape(&i_obs.grid) {
        return Err(invalid(
            "inversion grid",
            format!(
                "model {}×{}, v_mig {}×{}, image {}×{}",
                g.nz, g.nx, v_mig.grid.nz, v_mig.grid.nx, i_obs.grid.nz, i_obs.grid.nx
            ),
        ));
    }
    if i_obs.n_lag != model.arch.n_lag() {
        return Err(invalid("inversion lags", format!("image has {}, model emits {}", i_obs.n_lag, model.arch.n_lag())));
    }
    Ok(())
}

fn run(
    model: &HybridOperatorModel,
    prior: Option<Prior<'_>>,
    v_mig: &VelocityField,
    i_obs: &ExtendedImageVolume,
    norm: &NormalizationSpec,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    check_inputs(model, v_mig, i_obs)?;
    let prior = prior.filter(|_| cfg.diffuse_every > 0);
    let mig = norm.normalize_velocity(v_mig);
    let target = norm.normalize_image(&i_obs.values);
    let mut v = mig.clone();
    let mut adam = Adam::<f32>::new(AdamConfig::default(), &[v.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.bounds;
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let lr = cfg.lr.lr_at(iter);
        let (loss, grad) = match inversion_loss(model, &v, &mig, &target) {
            Ok((l, _)) if !l.is_finite() => return Err(Error::NonFiniteLoss { context: format!("inversion iteration {iter}") }),
            Err(e) if e.is_numerical() => return Err(Error::NonFiniteLoss { context: format!("inversion iteration {iter}") }),
            r => r?,
        };
        adam.update(&mut [&mut v[..]], &[&grad[..]], lr)?;
        v.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
        let mut refined = false;
        if let Some(p) = prior {
            if (iter + 1) % cfg.diffuse_every == 0 {
                v = refine(&v, p, cfg, &mut rng)?;
                adam.reset();
                refined = true;
            }
        }
        history.push(IterRecord { iter, loss, lr, refined });
    }
    if let Some(p) = prior {
        if cfg.iterations % cfg.diffuse_every != 0 {
            v = refine(&v, p, cfg, &mut rng)?;
        }
    }
    Ok(InversionResult { velocity: norm.denormalize_velocity(v_mig.grid, &v), normalized: v, history })
}

fn refine(v: &[f32], p: Prior<'_>, cfg: &InversionConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let mut out = refine_conditioned(v, cfg.s_cond, cfg.k_steps, p.denoiser, p.schedule, rng)?;
    out.iter_mut().for_each(|x| *x = x.clamp(cfg.bounds.0, cfg.bounds.1));
    Ok(out)
}

/// Surrogate-only inversion starting from `v_mig`. `i_obs` is in physical
/// image units; `norm` is the training normalization.
pub fn invert_no(
    model: &HybridOperatorModel,
    v_mig: &VelocityField,
    i_obs: &ExtendedImageVolume,
    norm: &NormalizationSpec,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    run(model, None, v_mig, i_obs, norm, cfg)
}

/// Inversion with periodic diffusion refinement; the final iterate is
/// refined once more unless the last iteration already did.
pub fn invert_no_ddpm(
    model: &HybridOperatorModel,
    prior: Prior<'_>,
    v_mig: &VelocityField,
    i_obs: &ExtendedImageVolume,
    norm: &NormalizationSpec,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    run(model, Some(prior), v_mig, i_obs, norm, cfg)
}

/// Amplitude spectrum of the vertical profiles, averaged over all columns.
pub fn mean_vertical_spectrum(v: &VelocityField) -> Spectrum {
    let nx = v.grid.nx;
    let mut acc: Option<Spectrum> = None;
    for ix in 0..nx {
        let col: Vec<f64> = v.column(ix).iter().map(|&x| x as f64).collect();
        let s = profile_spectrum(&col, v.grid.dz);
        match &mut acc {
            None => acc = Some(s),
            Some(a) => a.amplitude.iter_mut().zip(&s.amplitude).for_each(|(x, y)| *x += y),
        }
    }
    let mut s = acc.expect("grid has columns");
    s.amplitude.iter_mut().for_each(|a| *a /= nx as f64);
    s
}

/// Mid-band wavenumber bins `nz/16 ..= nz/4`.
pub fn mid_band(nz: usize) -> std::ops::RangeInclusive<usize> {
    (nz / 16).max(1)..=nz / 4
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub time_lag: InversionResult,
    pub zero_lag: InversionResult,
    pub initial: Spectrum,
    pub zero_spectrum: Spectrum,
    pub lag_spectrum: Spectrum,
}

impl AblationReport {
    /// Fraction of mid-band bins where the time-lag recovery has at least
    /// the zero-lag amplitude.
    pub fn lag_wins(&self) -> f64 {
        let band = mid_band(self.initial.n);
        let n = band.clone().count();
        band.filter(|&k| self.lag_spectrum.amplitude[k] >= self.zero_spectrum.amplitude[k]).count() as f64 / n as f64
    }

    /// Fractions of mid-band bins where (time-lag, zero-lag) exceed the
    /// initial model.
    pub fn above_initial(&self) -> (f64, f64) {
        let band = mid_band(self.initial.n);
        let n = band.clone().count() as f64;
        let frac = |s: &Spectrum| band.clone().filter(|&k| s.amplitude[k] > self.initial.amplitude[k]).count() as f64 / n;
        (frac(&self.lag_spectrum), frac(&self.zero_spectrum))
    }

    /// CSV `wavenumber,initial,zero_lag,time_lag`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::domain::write_spectra_csv(
            path,
            &[("initial", &self.initial), ("zero_lag", &self.zero_spectrum), ("time_lag", &self.lag_spectrum)],
        )
    }
}

/// Inverts the same sample with a time-lag operator and a zero-lag operator
/// (trained on the centre lag only) and compares their vertical spectra.
pub fn zero_lag_ablation(
    model_lag: &HybridOperatorModel,
    model_zero: &HybridOperatorModel,
    v_mig: &VelocityField,
    i_obs: &ExtendedImageVolume,
    norm: &NormalizationSpec,
    cfg: &InversionConfig,
) -> Result<AblationReport> {
    if model_zero.arch.n_lag() != 1 {
        return Err(invalid("zero-lag ablation", format!("zero-lag model emits {} lags", model_zero.arch.n_lag())));
    }
    let zero_obs = ExtendedImageVolume::new(i_obs.grid, 1, i_obs.d_tau, i_obs.zero_lag().to_vec())?;
    let time_lag = invert_no(model_lag, v_mig, i_obs, norm, cfg)?;
    let zero_lag = invert_no(model_zero, v_mig, &zero_obs, norm, cfg)?;
    Ok(AblationReport {
        initial: mean_vertical_spectrum(v_mig),
        zero_spectrum: mean_vertical_spectrum(&zero_lag.velocity),
        lag_spectrum: mean_vertical_spectrum(&time_lag.velocity),
        time_lag,
        zero_lag,
    })
}

/// Overlapping tiling of a large grid with per-patch blend weights that sum
/// to one at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    pub grid: Grid2D,
    pub patch: (usize, usize),
    /// Top-left corner `(z0, x0)` of each patch.
    pub origins: Vec<(usize, usize)>,
    /// Row-major `patch.0 × patch.1` weights per patch.
    pub weights: Vec<Vec<f32>>,
}

fn axis_origins(n: usize, p: usize, overlap: f64) -> Vec<usize> {
    if p == n {
        return vec![0];
    }
    let stride = ((p as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut o: Vec<usize> = (0..).map(|i| i * stride).take_while(|&x| x + p < n).collect();
    o.push(n - p);
    o
}

/// Raised-cosine window, strictly positive on `0..p`.
fn taper(p: usize) -> Vec<f64> {
    (0..p).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * (i as f64 + 0.5) / p as f64).cos()).collect()
}

pub fn make_patch_plan(grid: Grid2D, pz: usize, px: usize, overlap: f64) -> Result<PatchPlan> {
    grid.validate()?;
    if pz == 0 || px == 0 || pz > grid.nz || px > grid.nx || !(0.0..1.0).contains(&overlap) {
        return Err(invalid(
            "patch plan",
            format!("patch {pz}×{px} with overlap {overlap} on a {}×{} grid", grid.nz, grid.nx),
        ));
    }
    let (oz, ox) = (axis_origins(grid.nz, pz, overlap), axis_origins(grid.nx, px, overlap));
    let origins: Vec<(usize, usize)> = oz.iter().flat_map(|&z| ox.iter().map(move |&x| (z, x))).collect();
    let (wz, wx) = (taper(pz), taper(px));
    let raw: Vec<f64> = wz.iter().flat_map(|a| wx.iter().map(move |b| a * b)).collect();
    let mut total = vec![0.0f64; grid.len()];
    for &(z0, x0) in &origins {
        for i in 0..pz {
            for j in 0..px {
                total[(z0 + i) * grid.nx + x0 + j] += raw[i * px + j];
            }
        }
    }
    let weights = origins
        .iter()
        .map(|&(z0, x0)| {
            (0..pz * px).map(|k| (raw[k] / total[(z0 + k / px) * grid.nx + x0 + k % px]) as f32).collect()
        })
        .collect();
    Ok(PatchPlan { grid, patch: (pz, px), origins, weights })
}

impl PatchPlan {
    /// Pixelwise sum of the blend weights.
    pub fn coverage(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.grid.len()];
        let (pz, px) = self.patch;
        for (&(z0, x0), w) in self.origins.iter().zip(&self.weights) {
            for k in 0..pz * px {
                c[(z0 + k / px) * self.grid.nx + x0 + k % px] += w[k] as f64;
            }
        }
        c
    }

    fn patch_grid(&self) -> Grid2D {
        Grid2D { nz: self.patch.0, nx: self.patch.1, ..self.grid }
    }

    pub fn extract_velocity(&self, v: &VelocityField, p: usize) -> VelocityField {
        let (z0, x0) = self.origins[p];
        let (pz, px) = self.patch;
        let values = (0..pz).flat_map(|i| v.values[(z0 + i) * self.grid.nx + x0..][..px].iter().copied()).collect();
        VelocityField { grid: self.patch_grid(), values }
    }

    pub fn extract_image(&self, img: &ExtendedImageVolume, p: usize) -> Result<ExtendedImageVolume> {
        let (z0, x0) = self.origins[p];
        let (pz, px) = self.patch;
        let n = self.grid.len();
        let values = (0..img.n_lag)
            .flat_map(|l| (0..pz).flat_map(move |i| img.values[l * n + (z0 + i) * self.grid.nx + x0..][..px].iter().copied()))
            .collect();
        ExtendedImageVolume::new(self.patch_grid(), img.n_lag, img.d_tau, values)
    }

    /// Weighted sum of per-patch fields, in plan order.
    pub fn blend(&self, parts: &[VelocityField]) -> VelocityField {
        let mut acc = vec![0.0f64; self.grid.len()];
        let (pz, px) = self.patch;
        for ((&(z0, x0), w), part) in self.origins.iter().zip(&self.weights).zip(parts) {
            for k in 0..pz * px {
                acc[(z0 + k / px) * self.grid.nx + x0 + k % px] += w[k] as f64 * part.values[k] as f64;
            }
        }
        VelocityField { grid: self.grid, values: acc.into_iter().map(|x| x as f32).collect() }
    }
}

/// Blended patch inversion with the per-patch loss histories.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchedInversion {
    pub velocity: VelocityField,
    pub histories: Vec<Vec<IterRecord>>,
}

impl PatchedInversion {
    /// Per-iteration loss averaged over patches, in the single-run CSV layout.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iter,loss,lr,refined\n");
        let n = self.histories.len() as f64;
        for (i, h) in self.histories[0].iter().enumerate() {
            let loss = self.histories.iter().map(|hs| hs[i].loss).sum::<f64>() / n;
            let _ = writeln!(out, "{},{loss:e},{:e},{}", h.iter, h.lr, u8::from(h.refined));
        }
        out
    }
}

/// Inverts every patch independently and blends the results.
pub fn patch_invert(
    model: &HybridOperatorModel,
    prior: Option<Prior<'_>>,
    v_mig: &VelocityField,
    i_obs: &ExtendedImageVolume,
    plan: &PatchPlan,
    norm: &NormalizationSpec,
    cfg: &InversionConfig,
) -> Result<PatchedInversion> {
    if !plan.grid.same_shape(&v_mig.grid) || !plan.grid.same_shape(&i_obs.grid) {
        return Err(invalid("patch inversion", "plan, velocity and image grids differ"));
    }
    let one = |p: usize, prior: Option<Prior<'_>>| -> Result<InversionResult> {
        let vm = plan.extract_velocity(v_mig, p);
        let obs = plan.extract_image(i_obs, p)?;
        match prior {
            Some(pr) => invert_no_ddpm(model, pr, &vm, &obs, norm, cfg),
            None => invert_no(model, &vm, &obs, norm, cfg),
        }
    };
    let n = plan.origins.len();
    let runs: Vec<InversionResult> = match prior {
        // The denoiser is not required to be thread-safe.
        Some(_) => (0..n).map(|p| one(p, prior)).collect::<Result<_>>()?,
        None => (0..n).into_par_iter().map(|p| one(p, None)).collect::<Result<_>>()?,
    };
    let (parts, histories): (Vec<_>, Vec<_>) = runs.into_iter().map(|r| (r.velocity, r.history)).unzip();
    Ok(PatchedInversion { velocity: plan.blend(&parts), histories })
}
