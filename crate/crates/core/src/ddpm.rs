//! Diffusion prior over normalized velocity models and the single-jump
//! refinement used inside inversion.
//!
//! Steps are 1-based: `s ∈ 1..=S`, with `ᾱ_0 = 1`. A reverse transition from
//! `s` to any `t < s` uses `α_{s→t} = ᾱ_s / ᾱ_t`:
//!
//! ```text
//! v_t = (v_s − (1 − α_{s→t}) / √(1 − ᾱ_s) · ε̂) / √α_{s→t} + √(1 − α_{s→t}) · z
//! ```
//!
//! which is the usual ancestral step when `t = s − 1`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vmb_autodiff::{Adam, AdamConfig, Checkpoint, ParamSet, Real, StepDecay, Tape, Var};

use crate::domain::Grid2D;
use crate::error::{invalid, Error, Result};
use crate::nn::{Bound, Builder};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(
                "noise schedule",
                format!("need S ≥ 1 and 0 < β_start ≤ β_end < 1, got S={steps}, [{beta_start}, {beta_end}]"),
            ));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self { beta, alpha, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ_s` for `s ∈ 0..=S`.
    pub fn alpha_bar_at(&self, s: usize) -> f64 {
        if s == 0 { 1.0 } else { self.alpha_bar[s - 1] }
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(invalid("diffusion step", format!("{s} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }
}

/// `√ᾱ_s · v0 + √(1 − ᾱ_s) · ε`.
pub fn q_sample(v0: &[f32], s: usize, eps: &[f32], sched: &NoiseSchedule) -> Result<Vec<f32>> {
    sched.check_step(s)?;
    if eps.len() != v0.len() {
        return Err(invalid("q_sample", format!("noise of {} values for {}", eps.len(), v0.len())));
    }
    let ab = sched.alpha_bar_at(s);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(v0.iter().zip(eps).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect())
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Anything that predicts the noise in a batch of `[1,H,W]` samples at a
/// common step.
pub trait NoisePredictor {
    fn predict_noise(&self, v_s: &[f32], batch: usize, s: usize) -> Result<Vec<f32>>;
}

/// Reverse transition `s → t` (`t < s`) given the predicted noise.
pub fn transition(
    v_s: &[f32],
    s: usize,
    t: usize,
    eps_hat: &[f32],
    sched: &NoiseSchedule,
    z: Option<&[f32]>,
) -> Result<Vec<f32>> {
    sched.check_step(s)?;
    if t >= s {
        return Err(invalid("reverse transition", format!("target step {t} not below {s}")));
    }
    if eps_hat.len() != v_s.len() || z.is_some_and(|z| z.len() != v_s.len()) {
        return Err(invalid("reverse transition", "noise and state lengths differ"));
    }
    let (ab_s, ab_t) = (sched.alpha_bar_at(s), sched.alpha_bar_at(t));
    let a = ab_s / ab_t;
    let c = (1.0 - a) / (1.0 - ab_s).sqrt();
    let inv = 1.0 / a.sqrt();
    let sig = (1.0 - a).sqrt();
    Ok(v_s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mean = inv * (v as f64 - c * eps_hat[i] as f64);
            (mean + z.map_or(0.0, |z| sig * z[i] as f64)) as f32
        })
        .collect())
}

/// One ancestral step `s → s−1`; `z = None` is the deterministic step.
pub fn reverse_step(
    v_s: &[f32],
    batch: usize,
    s: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    z: Option<&[f32]>,
) -> Result<Vec<f32>> {
    sched.check_step(s)?;
    let eps = model.predict_noise(v_s, batch, s)?;
    transition(v_s, s, s - 1, &eps, sched, z)
}

/// Steps visited by a `k`-jump reverse pass from `s_cond` to 0.
pub fn jump_steps(s_cond: usize, k_steps: usize) -> Vec<usize> {
    let k = k_steps.min(s_cond);
    let mut steps: Vec<usize> = (0..=k).map(|i| (s_cond * (k - i) + k / 2) / k).collect();
    steps.dedup();
    steps
}

/// Noises `v_guess` to `s_cond`, then denoises back to step 0 in `k_steps`
/// evenly spaced jumps; the last jump adds no noise.
pub fn refine_conditioned(
    v_guess: &[f32],
    s_cond: usize,
    k_steps: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    sched.check_step(s_cond)?;
    if k_steps == 0 {
        return Err(invalid("refinement", "k_steps must be at least 1"));
    }
    let eps = standard_normal(rng, v_guess.len());
    let mut v = q_sample(v_guess, s_cond, &eps, sched)?;
    let steps = jump_steps(s_cond, k_steps);
    for w in steps.windows(2) {
        let (s, t) = (w[0], w[1]);
        let eps_hat = model.predict_noise(&v, 1, s)?;
        let z = (t > 0).then(|| standard_normal(rng, v.len()));
        v = transition(&v, s, t, &eps_hat, sched, z.as_deref())?;
    }
    Ok(v)
}

/// Unconditional samples: the full ancestral chain from pure noise.
pub fn sample(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    n: usize,
    len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f32>>> {
    let mut v = standard_normal(rng, n * len);
    for s in (1..=sched.steps()).rev() {
        let z = (s > 1).then(|| standard_normal(rng, v.len()));
        v = reverse_step(&v, n, s, model, sched, z.as_deref())?;
    }
    Ok(v.chunks(len).map(<[f32]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserArch {
    pub grid: Grid2D,
    pub widths: [usize; 4],
    /// Sinusoidal embedding size (even).
    pub emb_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            grid: Grid2D { nz: 64, nx: 128, dz: 10.0, dx: 10.0 },
            widths: [16, 24, 32, 48],
            emb_dim: 32,
        }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.grid.nz % 8 != 0 || self.grid.nx % 8 != 0 {
            return Err(invalid("denoiser", format!("grid {}×{} not divisible by 8", self.grid.nz, self.grid.nx)));
        }
        if self.widths.contains(&0) || self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(invalid("denoiser", format!("{self:?}")));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        2 * self.emb_dim
    }
}

/// Sinusoidal embedding of step `s`, `[sin(s·ω_k), cos(s·ω_k)]`.
pub fn step_embedding(s: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |k: usize| (-(10_000f64).ln() * k as f64 / half as f64).exp();
    let mut e: Vec<f64> = (0..half).map(|k| (s as f64 * freq(k)).sin()).collect();
    e.extend((0..half).map(|k| (s as f64 * freq(k)).cos()));
    e
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: DenoiserArch,
    pub params: ParamSet<f32>,
}

/// Parameters of the step-conditioned U-Net: `emb.fc{1,2}`, input conv
/// `inp`, encoder blocks `enc{i}` with embedding projections `enc{i}.emb`,
/// decoder blocks `dec{j}` (three, after each upsampling), output conv `out`
/// (zero-initialized, so the untrained model predicts zero noise).
pub fn build_denoiser(arch: &DenoiserArch, seed: u64) -> Result<DenoiserModel> {
    arch.validate()?;
    let w = arch.widths;
    let hid = arch.hidden();
    let mut b = Builder::new(seed);
    b.linear("emb.fc1", hid, arch.emb_dim);
    b.linear("emb.fc2", hid, hid);
    b.conv("inp", w[0], 1, 3, true);
    let mut c = w[0];
    for (i, &e) in w.iter().enumerate() {
        b.residual_block(&format!("enc{i}"), c, e);
        b.linear(&format!("enc{i}.emb"), e, hid);
        c = e;
    }
    for j in 0..3 {
        let (skip, d) = (w[2 - j], w[2 - j]);
        b.residual_block(&format!("dec{j}"), c + skip, d);
        b.linear(&format!("dec{j}.emb"), d, hid);
        c = d;
    }
    b.conv("out", 1, c, 3, true);
    let mut params = b.finish();
    if let Some(p) = params.by_name_mut("out.w") {
        p.value.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(DenoiserModel { arch: *arch, params })
}

/// Noise prediction graph for `x: [B,1,H,W]` and per-sample steps.
pub fn denoiser_graph<'t, T: Real>(
    arch: &DenoiserArch,
    p: &Bound<'t, T>,
    x: Var<'t, T>,
    steps: &[usize],
) -> Result<Var<'t, T>> {
    let s = x.shape();
    let g = arch.grid;
    if s.len() != 4 || s[1] != 1 || s[2] != g.nz || s[3] != g.nx || s[0] != steps.len() {
        return Err(invalid("denoiser input", format!("expected [{},1,{},{}], got {s:?}", steps.len(), g.nz, g.nx)));
    }
    let tape = x.tape();
    let emb: Vec<T> = steps.iter().flat_map(|&s| step_embedding(s, arch.emb_dim)).map(T::lit).collect();
    let emb = tape.constant(&[steps.len(), arch.emb_dim], emb)?;
    let emb = p.linear(emb, "emb.fc1")?.gelu()?;
    let emb = p.linear(emb, "emb.fc2")?.gelu()?;
    let mut h = p.conv(x, "inp")?;
    let mut skips = Vec::with_capacity(3);
    for i in 0..4 {
        let e = p.linear(emb, &format!("enc{i}.emb"))?;
        h = p.residual_block(h, &format!("enc{i}"), Some(e))?;
        if i < 3 {
            skips.push(h);
            h = h.avg_pool2()?;
        }
    }
    for j in 0..3 {
        let e = p.linear(emb, &format!("dec{j}.emb"))?;
        h = h.upsample2_bilinear()?.concat_channels(skips[2 - j])?;
        h = p.residual_block(h, &format!("dec{j}"), Some(e))?;
    }
    p.conv(h, "out")
}

impl DenoiserModel {
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Frozen noise prediction with a separate step per sample.
    pub fn predict_at(&self, v_s: &[f32], steps: &[usize]) -> Result<Vec<f32>> {
        let g = self.arch.grid;
        let tape = Tape::<f32>::new();
        let p = Bound::new(&self.params, self.params.bind_frozen(&tape));
        let x = tape.constant(&[steps.len(), 1, g.nz, g.nx], v_s.to_vec())?;
        Ok(denoiser_graph(&self.arch, &p, x, steps)?.to_vec())
    }

    pub fn checkpoint(&self, adam: Option<&Adam<f32>>) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params, adam);
        let g = self.arch.grid;
        let w = self.arch.widths;
        ck.meta.insert("model".into(), "denoiser".into());
        ck.meta.insert("arch.grid".into(), format!("{},{},{},{}", g.nz, g.nx, g.dz, g.dx));
        ck.meta.insert("arch.widths".into(), format!("{},{},{},{}", w[0], w[1], w[2], w[3]));
        ck.meta.insert("arch.emb_dim".into(), self.arch.emb_dim.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let bad = |k: &str| Error::Header { path: path.to_path_buf(), msg: format!("checkpoint field {k}") };
        let nums = |k: &str| -> Result<Vec<f64>> {
            let text = ck.meta.get(k).ok_or_else(|| bad(k))?;
            text.split(',').map(|t| t.parse().map_err(|_| bad(k))).collect()
        };
        let (g, w, e) = (nums("arch.grid")?, nums("arch.widths")?, nums("arch.emb_dim")?);
        if g.len() != 4 || w.len() != 4 || e.len() != 1 {
            return Err(bad("arch"));
        }
        let arch = DenoiserArch {
            grid: Grid2D::new(g[0] as usize, g[1] as usize, g[2], g[3])?,
            widths: [w[0] as usize, w[1] as usize, w[2] as usize, w[3] as usize],
            emb_dim: e[0] as usize,
        };
        let mut model = build_denoiser(&arch, 0)?;
        ck.restore_params(&mut model.params, &path.display().to_string())?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, path)
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, v_s: &[f32], batch: usize, s: usize) -> Result<Vec<f32>> {
        self.predict_at(v_s, &vec![s; batch])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdpmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepDecay,
    pub seed: u64,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 4, lr: StepDecay::constant(1e-4), seed: 11 }
    }
}

/// `(s, ε)` for corpus sample `idx` in `epoch`, independent of batch order.
pub fn training_draw(seed: u64, epoch: usize, idx: usize, steps: usize, len: usize) -> (usize, Vec<f32>) {
    let key = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (idx as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let s = rng.random_range(1..=steps);
    (s, standard_normal(&mut rng, len))
}

/// Noise-prediction MSE on the samples `idx` with their draws for `epoch`;
/// returns the loss and, when `params` are bound for training, the graph.
fn batch_loss<'t>(
    model: &DenoiserModel,
    p: &Bound<'t, f32>,
    tape: &'t Tape<f32>,
    corpus: &[Vec<f32>],
    idx: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
    epoch: usize,
) -> Result<Var<'t, f32>> {
    let g = model.arch.grid;
    let mut xs = Vec::with_capacity(idx.len() * g.len());
    let mut eps = Vec::with_capacity(idx.len() * g.len());
    let mut steps = Vec::with_capacity(idx.len());
    for &i in idx {
        let (s, e) = training_draw(seed, epoch, i, sched.steps(), g.len());
        xs.extend(q_sample(&corpus[i], s, &e, sched)?);
        eps.extend(e);
        steps.push(s);
    }
    let x = tape.constant(&[idx.len(), 1, g.nz, g.nx], xs)?;
    let target = tape.constant(&[idx.len(), 1, g.nz, g.nx], eps)?;
    Ok(denoiser_graph(&model.arch, p, x, &steps)?.mse(target)?)
}

/// Loss of the frozen model on `idx` with the draws of `epoch`.
pub fn ddpm_loss(
    model: &DenoiserModel,
    corpus: &[Vec<f32>],
    idx: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let tape = Tape::<f32>::new();
    let p = Bound::new(&model.params, model.params.bind_frozen(&tape));
    Ok(batch_loss(model, &p, &tape, corpus, idx, sched, seed, epoch)?.item() as f64)
}

pub fn ddpm_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("ddpm.velc")
}

pub fn ddpm_log_path(dir: &Path) -> PathBuf {
    dir.join("ddpm_log.csv")
}

/// Trains the denoiser on normalized `[H,W]` models; writes `ddpm_log.csv`
/// (`epoch,loss,lr`) and `ddpm.velc` into `out`. Returns per-epoch losses.
pub fn train_ddpm(
    model: &mut DenoiserModel,
    corpus: &[Vec<f32>],
    sched: &NoiseSchedule,
    cfg: &DdpmTrainConfig,
    out: &Path,
) -> Result<Vec<f64>> {
    let g = model.arch.grid;
    if corpus.is_empty() || corpus.iter().any(|v| v.len() != g.len()) {
        return Err(invalid("diffusion corpus", format!("need samples of {} values", g.len())));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr.base > 0.0) {
        return Err(invalid("diffusion training config", format!("{cfg:?}")));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut adam = Adam::for_params(AdamConfig::default(), &model.params);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut csv = String::from("epoch,loss,lr\n");
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr_at(epoch);
        let order = crate::neural_op::epoch_order(corpus.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = || Error::NonFiniteLoss { context: format!("epoch {epoch}, batch {bi}, lr {lr:e}") };
            let tape = Tape::<f32>::new();
            let p = Bound::new(&model.params, model.params.bind(&tape));
            let step = || -> Result<_> {
                let loss = batch_loss(model, &p, &tape, corpus, chunk, sched, cfg.seed, epoch)?;
                Ok((loss.item() as f64, tape.backward(loss)?))
            };
            let (value, grads) = match step() {
                Ok((v, _)) if !v.is_finite() => return Err(diverged()),
                Ok(r) => r,
                Err(e) if e.is_numerical() => return Err(diverged()),
                Err(e) => return Err(e),
            };
            model.params.zero_grad();
            model.params.accumulate(p.vars(), &grads);
            adam.step_params(&mut model.params, lr)?;
            total += value * chunk.len() as f64;
        }
        let loss = total / corpus.len() as f64;
        log::info!("ddpm epoch {epoch}: loss {loss:.5e}");
        let _ = writeln!(csv, "{epoch},{loss:e},{lr:e}");
        losses.push(loss);
    }
    let log_path = ddpm_log_path(out);
    fs::write(&log_path, csv).map_err(|e| Error::io(&log_path, e))?;
    let mut ck = model.checkpoint(Some(&adam));
    ck.meta.insert("epoch".into(), (cfg.epochs - 1).to_string());
    ck.write(&ddpm_checkpoint_path(out))?;
    Ok(losses)
}
