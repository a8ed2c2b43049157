//! The hybrid FNO/U-Net surrogate: (true velocity, migration velocity) →
//! extended image.
//!
//! ```text
//! [2,H,W] ─ lift 3×3 ─ FNO ─ enc0 ─ enc1 ─ enc2 ─ enc3 ─┐
//!                             │      │      │      │     pool
//!                             └──────┴──────┴──────┴─ attention-gated skips
//!                                                        │
//! [n_lag,H,W] ─ proj 1×1 ─ FNO ─ dec3 ─ dec2 ─ dec1 ─ dec0
//! ```
//!
//! Encoder stages stack residual blocks and end with 2×2 average pooling;
//! decoder stages upsample bilinearly, concatenate the gated skip and apply
//! three conv/norm/GELU layers. An FNO layer is `gelu(K(x) + W x)` with `K`
//! the truncated spectral multiply and `W` a 1×1 convolution.
//!
//! Parameter names and shapes (`L` lift width, `e_i`/`d_j` stage widths,
//! `R = 2·mz − 1`):
//!
//! | name | shape |
//! |---|---|
//! | `lift.w`, `lift.b` | `[L,2,3,3]`, `[L]` |
//! | `fno_in.spec` | `[L,L,R,mx,2]` |
//! | `fno_in.pw.w`, `fno_in.pw.b` | `[L,L,1,1]`, `[L]` |
//! | `enc{i}.blk{k}.conv{1,2}.{w,b}` | `[e_i,c,3,3]`, `[e_i]` |
//! | `enc{i}.blk{k}.skip.w` | `[e_i,c,1,1]` when `c ≠ e_i` |
//! | `dec{j}.att.fc1.{w,b}` | `[r,e_s+c_up]`, `[r]`, `r = max(4, (e_s+c_up)/4)` |
//! | `dec{j}.att.fc2.{w,b}` | `[e_s,r]`, `[e_s]` |
//! | `dec{j}.att.sp.{w,b}` | `[1,3,7,7]`, `[1]` |
//! | `dec{j}.conv1.{w,b}` | `[d_j,c_up+e_s,3,3]`, `[d_j]` |
//! | `dec{j}.conv{2,3}.{w,b}` | `[d_j,d_j,3,3]`, `[d_j]` |
//! | `fno_out.*` | as `fno_in` with width `d_3` |
//! | `proj.w`, `proj.b` | `[n_lag,d_3,1,1]`, `[n_lag]` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmb_autodiff::{Adam, AdamConfig, Checkpoint, Modes, ParamSet, Real, StepDecay, Tape, Var};

use crate::domain::{ExtendedImageVolume, Grid2D};
use crate::error::{invalid, Error, Result};
use crate::nn::{Bound, Builder};
use crate::velgen::Manifest;
use crate::wave_sim::LagAxis;

pub const STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorArch {
    pub grid: Grid2D,
    /// Output lag axis; the model emits `lag.n_lag` channels.
    pub lag: LagAxis,
    pub modes: Modes,
    pub lift: usize,
    pub encoder: [usize; STAGES],
    pub decoder: [usize; STAGES],
    pub attention: [bool; STAGES],
    /// Residual blocks per encoder stage (`backbone=mini`).
    pub blocks: usize,
    /// `false` drops the spectral path of both FNO layers.
    pub spectral: bool,
}

impl Default for OperatorArch {
    fn default() -> Self {
        Self {
            grid: Grid2D { nz: 64, nx: 128, dz: 10.0, dx: 10.0 },
            lag: LagAxis::default(),
            modes: Modes { mz: 8, mx: 8 },
            lift: 16,
            encoder: [16, 24, 32, 48],
            decoder: [32, 24, 16, 16],
            attention: [true; STAGES],
            blocks: 2,
            spectral: true,
        }
    }
}

pub const IN_CHANNELS: usize = 2;

impl OperatorArch {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |msg: String| Err(invalid("operator architecture", msg));
        let (nz, nx) = (self.grid.nz, self.grid.nx);
        let f = 1 << STAGES;
        if nz % f != 0 || nx % f != 0 {
            return bad(format!("grid {nz}×{nx} must be divisible by {f}"));
        }
        if self.lag.n_lag % 2 == 0 {
            return bad(format!("n_lag = {} must be odd", self.lag.n_lag));
        }
        if self.lift == 0 || self.blocks == 0 || self.encoder.contains(&0) || self.decoder.contains(&0) {
            return bad("widths and block counts must be positive".into());
        }
        self.modes.validate(nz, nx)?;
        Ok(())
    }

    pub fn n_lag(&self) -> usize {
        self.lag.n_lag
    }

    fn to_meta(self, meta: &mut BTreeMap<String, String>) {
        let join = |a: &[usize]| a.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let g = self.grid;
        let put = |m: &mut BTreeMap<String, String>, k: &str, v: String| {
            m.insert(format!("arch.{k}"), v);
        };
        put(meta, "grid", format!("{},{},{},{}", g.nz, g.nx, g.dz, g.dx));
        put(meta, "lag", format!("{},{}", self.lag.n_lag, self.lag.d_tau));
        put(meta, "modes", format!("{},{}", self.modes.mz, self.modes.mx));
        put(meta, "lift", self.lift.to_string());
        put(meta, "encoder", join(&self.encoder));
        put(meta, "decoder", join(&self.decoder));
        put(meta, "attention", self.attention.map(|a| if a { "1" } else { "0" }).join(","));
        put(meta, "blocks", self.blocks.to_string());
        put(meta, "spectral", self.spectral.to_string());
        put(meta, "backbone", "mini".into());
    }

    fn from_meta(meta: &BTreeMap<String, String>, path: &Path) -> Result<Self> {
        let bad = |k: &str| Error::Header { path: path.to_path_buf(), msg: format!("checkpoint field arch.{k}") };
        let get = |k: &str| meta.get(&format!("arch.{k}")).map(String::as_str).ok_or_else(|| bad(k));
        let nums = |k: &str| -> Result<Vec<f64>> {
            get(k)?.split(',').map(|t| t.parse::<f64>().map_err(|_| bad(k))).collect()
        };
        let four = |k: &str| -> Result<[usize; STAGES]> {
            let v = nums(k)?;
            <[f64; STAGES]>::try_from(v).map(|a| a.map(|x| x as usize)).map_err(|_| bad(k))
        };
        let g = nums("grid")?;
        let lag = nums("lag")?;
        let modes = nums("modes")?;
        if g.len() != 4 || lag.len() != 2 || modes.len() != 2 {
            return Err(bad("grid"));
        }
        let attention = four("attention")?.map(|a| a == 1);
        let arch = Self {
            grid: Grid2D::new(g[0] as usize, g[1] as usize, g[2], g[3])?,
            lag: LagAxis { n_lag: lag[0] as usize, d_tau: lag[1] },
            modes: Modes { mz: modes[0] as usize, mx: modes[1] as usize },
            lift: get("lift")?.parse().map_err(|_| bad("lift"))?,
            encoder: four("encoder")?,
            decoder: four("decoder")?,
            attention,
            blocks: get("blocks")?.parse().map_err(|_| bad("blocks"))?,
            spectral: get("spectral")?.parse().map_err(|_| bad("spectral"))?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridOperatorModel {
    pub arch: OperatorArch,
    pub params: ParamSet<f32>,
}

fn attention_hidden(skip: usize, gate: usize) -> usize {
    ((skip + gate) / 4).max(4)
}

fn build_fno(b: &mut Builder, name: &str, width: usize, arch: &OperatorArch) {
    if arch.spectral {
        let shape = arch.modes.weight_shape(width, width, arch.grid.nz);
        let n: usize = shape.iter().product();
        let scale = 1.0 / (width * arch.modes.mz * arch.modes.mx) as f64;
        let w = b.init.uniform(n, scale);
        b.params.add(format!("{name}.spec"), &shape, w);
    }
    b.conv(&format!("{name}.pw"), width, width, 1, true);
}

/// Parameters for `arch`, initialized deterministically from `seed`.
pub fn build_model(arch: &OperatorArch, seed: u64) -> Result<HybridOperatorModel> {
    arch.validate()?;
    let mut b = Builder::new(seed);
    b.conv("lift", arch.lift, IN_CHANNELS, 3, true);
    build_fno(&mut b, "fno_in", arch.lift, arch);
    let mut c = arch.lift;
    for (i, &e) in arch.encoder.iter().enumerate() {
        for k in 0..arch.blocks {
            b.residual_block(&format!("enc{i}.blk{k}"), c, e);
            c = e;
        }
    }
    for j in 0..STAGES {
        let skip = arch.encoder[STAGES - 1 - j];
        let d = arch.decoder[j];
        if arch.attention[j] {
            let r = attention_hidden(skip, c);
            b.linear(&format!("dec{j}.att.fc1"), r, skip + c);
            b.linear(&format!("dec{j}.att.fc2"), skip, r);
            b.conv(&format!("dec{j}.att.sp"), 1, 3, 7, true);
        }
        b.conv(&format!("dec{j}.conv1"), d, c + skip, 3, true);
        b.conv(&format!("dec{j}.conv2"), d, d, 3, true);
        b.conv(&format!("dec{j}.conv3"), d, d, 3, true);
        c = d;
    }
    build_fno(&mut b, "fno_out", c, arch);
    b.conv("proj", arch.n_lag(), c, 1, true);
    Ok(HybridOperatorModel { arch: *arch, params: b.finish() })
}

fn fno_layer<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>, arch: &OperatorArch) -> Result<Var<'t, T>> {
    let pw = p.conv(x, &format!("{name}.pw"))?;
    let h = if arch.spectral {
        x.spectral_multiply(p.get(&format!("{name}.spec"))?, arch.modes)?.add(pw)?
    } else {
        pw
    };
    Ok(h.gelu()?)
}

fn stack_channels<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let a4 = a.reshape(&[sa[0], sa[1], 1, 1])?;
    let b4 = b.reshape(&[sb[0], sb[1], 1, 1])?;
    Ok(a4.concat_channels(b4)?.reshape(&[sa[0], sa[1] + sb[1]])?)
}

/// Channel then spatial attention on `skip`, conditioned on the decoder
/// features `gate` (same spatial size). Every scale lies in (0, 1).
pub fn attention_block<'t, T: Real>(
    p: &Bound<'t, T>,
    name: &str,
    skip: Var<'t, T>,
    gate: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (ss, sg) = (skip.shape(), gate.shape());
    if ss.len() != 4 || sg.len() != 4 || ss[0] != sg[0] || ss[2..] != sg[2..] {
        return Err(invalid("attention block", format!("skip {ss:?} vs gate {sg:?}")));
    }
    let pooled = stack_channels(skip.global_avg_pool()?, gate.global_avg_pool()?)?;
    let hidden = p.linear(pooled, &format!("{name}.fc1"))?.gelu()?;
    let channel = p.linear(hidden, &format!("{name}.fc2"))?.sigmoid()?;
    let x = skip.scale_channels(channel)?;
    let maps = x.channel_mean()?.concat_channels(x.channel_max()?)?.concat_channels(gate.channel_mean()?)?;
    let spatial = p.conv(maps, &format!("{name}.sp"))?.sigmoid()?;
    Ok(x.scale_spatial(spatial)?)
}

/// The full surrogate on a `[B,2,H,W]` input.
pub fn forward_graph<'t, T: Real>(arch: &OperatorArch, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != IN_CHANNELS || s[2] != arch.grid.nz || s[3] != arch.grid.nx {
        return Err(invalid(
            "operator input",
            format!("expected [B,2,{},{}], got {s:?}", arch.grid.nz, arch.grid.nx),
        ));
    }
    let h = p.conv(x, "lift")?.gelu()?;
    let mut h = fno_layer(p, "fno_in", h, arch)?;
    let mut skips = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        for k in 0..arch.blocks {
            h = p.residual_block(h, &format!("enc{i}.blk{k}"), None)?;
        }
        skips.push(h);
        h = h.avg_pool2()?;
    }
    for j in 0..STAGES {
        let up = h.upsample2_bilinear()?;
        let mut skip = skips[STAGES - 1 - j];
        if arch.attention[j] {
            skip = attention_block(p, &format!("dec{j}.att"), skip, up)?;
        }
        h = up.concat_channels(skip)?;
        for k in 1..=3 {
            h = p.conv_norm_act(h, &format!("dec{j}.conv{k}"))?;
        }
    }
    let h = fno_layer(p, "fno_out", h, arch)?;
    p.conv(h, "proj")
}

/// Stacks normalized `(v_true, v_mig)` channels into one `[2,H,W]` sample.
pub fn stack_input(v_true: &[f32], v_mig: &[f32]) -> Vec<f32> {
    v_true.iter().chain(v_mig).copied().collect()
}

impl HybridOperatorModel {
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Frozen evaluation of `batch` stacked `[2,H,W]` samples.
    pub fn predict(&self, inputs: &[f32], batch: usize) -> Result<Vec<f32>> {
        let g = self.arch.grid;
        let tape = Tape::<f32>::new();
        let p = Bound::new(&self.params, self.params.bind_frozen(&tape));
        let x = tape.constant(&[batch, IN_CHANNELS, g.nz, g.nx], inputs.to_vec())?;
        Ok(forward_graph(&self.arch, &p, x)?.to_vec())
    }

    /// Normalized extended image for normalized velocity channels.
    pub fn forward(&self, v_true: &[f32], v_mig: &[f32]) -> Result<ExtendedImageVolume> {
        let g = self.arch.grid;
        if v_true.len() != g.len() || v_mig.len() != g.len() {
            return Err(invalid(
                "operator input",
                format!("channels of {} / {} values on a {}×{} model grid", v_true.len(), v_mig.len(), g.nz, g.nx),
            ));
        }
        let out = self.predict(&stack_input(v_true, v_mig), 1)?;
        ExtendedImageVolume::new(g, self.arch.n_lag(), self.arch.lag.d_tau, out)
    }

    pub fn checkpoint(&self, adam: Option<&Adam<f32>>) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params, adam);
        self.arch.to_meta(&mut ck.meta);
        ck.meta.insert("model".into(), "hybrid-operator".into());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let arch = OperatorArch::from_meta(&ck.meta, path)?;
        let mut model = build_model(&arch, 0)?;
        ck.restore_params(&mut model.params, &path.display().to_string())?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, path)
    }
}

/// Normalized training pairs held in memory.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    /// `[2,H,W]` per sample.
    pub inputs: Vec<Vec<f32>>,
    /// `[n_lag,H,W]` per sample.
    pub labels: Vec<Vec<f32>>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Loads the training and validation splits of `manifest`, normalized with
/// its spec. With `n_lag = 1` only the zero-lag panel of each label is kept.
pub fn load_pairs(manifest: &Manifest, n_lag: usize) -> Result<(PairSet, PairSet)> {
    let m_lag = manifest.lag.n_lag;
    if n_lag != m_lag && n_lag != 1 {
        return Err(invalid("lag axis", format!("model emits {n_lag} lags, dataset has {m_lag}")));
    }
    let load = |recs: Vec<&crate::velgen::ManifestRecord>| -> Result<PairSet> {
        let mut set = PairSet::default();
        for r in recs {
            let s = manifest.load(r)?;
            let norm = &manifest.norm;
            set.inputs.push(stack_input(&norm.normalize_velocity(&s.v_true), &norm.normalize_velocity(&s.v_mig)));
            let label = if n_lag == m_lag { &s.label.values[..] } else { s.label.zero_lag() };
            set.labels.push(norm.normalize_image(label));
        }
        Ok(set)
    };
    Ok((load(manifest.train().collect())?, load(manifest.val().collect())?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepDecay,
    pub seed: u64,
    /// Save the rolling checkpoint every this many epochs.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            lr: StepDecay::constant(1e-3),
            seed: 7,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 || !(self.lr.base > 0.0) {
            return Err(invalid("training config", format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let err = || Error::Manifest { path: path.to_path_buf(), line: i + 1, msg: "bad log row".into() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err());
            }
            log.epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| err())?,
                train_loss: f[1].parse().map_err(|_| err())?,
                val_loss: f[2].parse().map_err(|_| err())?,
                lr: f[3].parse().map_err(|_| err())?,
            });
        }
        Ok(log)
    }

    pub fn best_val(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).min_by(f64::total_cmp)
    }
}

/// Output files of [`train_operator`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPaths {
    pub dir: PathBuf,
}

impl TrainPaths {
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("operator_best.velc")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("operator_last.velc")
    }
}

fn batch_tensor(set: &[Vec<f32>], idx: &[usize]) -> Vec<f32> {
    idx.iter().flat_map(|&i| set[i].iter().copied()).collect()
}

/// Mean per-sample MSE of the frozen model over `set`.
pub fn evaluate(model: &HybridOperatorModel, set: &PairSet, batch: usize) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let order: Vec<usize> = (0..set.len()).collect();
    for (bi, chunk) in order.chunks(batch.max(1)).enumerate() {
        let diverged = || Error::NonFiniteLoss { context: format!("validation batch {bi}") };
        let pred = match model.predict(&batch_tensor(&set.inputs, chunk), chunk.len()) {
            Err(e) if e.is_numerical() => return Err(diverged()),
            r => r?,
        };
        let label = batch_tensor(&set.labels, chunk);
        let se: f64 = pred.iter().zip(&label).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        if !se.is_finite() {
            return Err(diverged());
        }
        total += se / label.len() as f64 * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Epoch order: a fixed permutation per `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// One optimizer pass over `train`; returns the sample-weighted mean loss.
fn train_epoch(
    model: &mut HybridOperatorModel,
    adam: &mut Adam<f32>,
    train: &PairSet,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let g = model.arch.grid;
    let order = epoch_order(train.len(), cfg.seed, epoch);
    let mut total = 0.0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let diverged = || Error::NonFiniteLoss { context: format!("epoch {epoch}, batch {bi}, lr {lr:e}") };
        let tape = Tape::<f32>::new();
        let vars = model.params.bind(&tape);
        let p = Bound::new(&model.params, vars);
        let step = || -> Result<_> {
            let x = tape.constant(&[chunk.len(), IN_CHANNELS, g.nz, g.nx], batch_tensor(&train.inputs, chunk))?;
            let y = tape.constant(&[chunk.len(), model.arch.n_lag(), g.nz, g.nx], batch_tensor(&train.labels, chunk))?;
            let loss = forward_graph(&model.arch, &p, x)?.mse(y)?;
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
    Ok(total / train.len() as f64)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Supervised training on `train`, validating on `val` after each epoch.
/// Writes the CSV log, the best-validation checkpoint and a rolling
/// checkpoint (with optimizer state) into `out`. With `resume`, training
/// continues from the rolling checkpoint if present.
pub fn train_operator(
    model: &mut HybridOperatorModel,
    train: &PairSet,
    val: &PairSet,
    cfg: &TrainConfig,
    out: &Path,
    resume: bool,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("training set", "no samples"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths = TrainPaths { dir: out.to_path_buf() };
    let mut adam = Adam::for_params(AdamConfig::default(), &model.params);
    let mut log = TrainLog::default();
    let mut start = 0;
    if resume && paths.last().exists() {
        let ck = Checkpoint::read(&paths.last())?;
        *model = HybridOperatorModel::from_checkpoint(&ck, &paths.last())?;
        adam = ck
            .restore_adam(&model.params, AdamConfig::default())
            .ok_or_else(|| invalid("checkpoint", "rolling checkpoint lacks optimizer state"))?;
        start = ck.meta.get("epoch").and_then(|e| e.parse::<usize>().ok()).map_or(0, |e| e + 1);
        let text = fs::read_to_string(paths.log()).map_err(|e| Error::io(paths.log(), e))?;
        log = TrainLog::from_csv(&text, &paths.log())?;
        log.epochs.retain(|e| e.epoch < start);
        log::info!("resuming at epoch {start}");
    }
    let mut best = log.best_val().unwrap_or(f64::INFINITY);
    for epoch in start..cfg.epochs {
        let lr = cfg.lr.lr_at(epoch);
        let train_loss = train_epoch(model, &mut adam, train, cfg, epoch, lr)?;
        let val_loss = evaluate(model, val, cfg.batch_size).map_err(|e| match e {
            Error::NonFiniteLoss { context } => Error::NonFiniteLoss { context: format!("epoch {epoch}, {context}") },
            e => e,
        })?;
        log.epochs.push(EpochRecord { epoch, train_loss, val_loss, lr });
        log::info!("epoch {epoch}: train {train_loss:.5e} val {val_loss:.5e} lr {lr:.2e}");
        write_text(&paths.log(), &log.to_csv())?;
        let score = if val.is_empty() { train_loss } else { val_loss };
        if score < best {
            best = score;
            let mut ck = model.checkpoint(None);
            ck.meta.insert("epoch".into(), epoch.to_string());
            ck.write(&paths.best())?;
        }
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            let mut ck = model.checkpoint(Some(&adam));
            ck.meta.insert("epoch".into(), epoch.to_string());
            ck.write(&paths.last())?;
        }
    }
    Ok(log)
}
