//! The run configuration: one TOML file with a section per stage.
//!
//! Every field has a default, so an empty file is a valid desk-scale run.
//! Unknown keys are rejected. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vmb_autodiff::{Modes, StepDecay};
use vmb_core::ddpm::{DdpmTrainConfig, DenoiserArch, NoiseSchedule};
use vmb_core::domain::{AcquisitionGeometry, Grid2D, NormalizationSpec};
use vmb_core::inversion::InversionConfig;
use vmb_core::neural_op::{OperatorArch, TrainConfig};
use vmb_core::velgen::ModelGenConfig;
use vmb_core::wave_sim::{LagAxis, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub grid: GridSection,
    pub generator: GeneratorSection,
    pub norm: NormSection,
    pub geometry: GeometrySection,
    pub sim: SimSection,
    pub lag: LagSection,
    pub dataset: DatasetSection,
    pub operator: OperatorSection,
    pub ddpm: DdpmSection,
    pub inversion: InversionSection,
    pub rtm: RtmSection,
    pub spectrum: SpectrumSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            out_dir: PathBuf::from("run"),
            grid: Default::default(),
            generator: Default::default(),
            norm: Default::default(),
            geometry: Default::default(),
            sim: Default::default(),
            lag: Default::default(),
            dataset: Default::default(),
            operator: Default::default(),
            ddpm: Default::default(),
            inversion: Default::default(),
            rtm: Default::default(),
            spectrum: Default::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = ModelGenConfig::default().grid;
        Self { nz: g.nz, nx: g.nx, dz: g.dz, dx: g.dx }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub layers: (usize, usize),
    pub v_top: (f64, f64),
    pub v_bottom: (f64, f64),
    pub jitter: f64,
    pub fold_amplitude: (f64, f64),
    pub fold_wavelength: (f64, f64),
    pub fault_prob: f64,
    pub max_throw: f64,
    pub salt_prob: f64,
    pub salt_radius: (f64, f64),
    pub salt_velocity: f64,
    pub smooth_sigma: Option<f64>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let d = ModelGenConfig::default();
        Self {
            layers: d.layers,
            v_top: d.v_top,
            v_bottom: d.v_bottom,
            jitter: d.jitter,
            fold_amplitude: d.fold_amplitude,
            fold_wavelength: d.fold_wavelength,
            fault_prob: d.fault_prob,
            max_throw: d.max_throw,
            salt_prob: d.salt_prob,
            salt_radius: d.salt_radius,
            salt_velocity: d.salt_velocity,
            smooth_sigma: d.smooth_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormSection {
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for NormSection {
    fn default() -> Self {
        let n = NormalizationSpec::default();
        Self { v_min: n.v_min, v_max: n.v_max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub sources: usize,
    pub receivers: usize,
    pub depth: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self { sources: 8, receivers: 64, depth: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub nt: usize,
    pub dt: f64,
    pub f_peak: f64,
    pub halo: usize,
    pub taper_strength: f64,
    pub image_stride: usize,
    pub top_mute: usize,
    pub direct_mute: bool,
    pub vertical_filter: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            nt: s.nt,
            dt: s.dt,
            f_peak: s.f_peak,
            halo: s.halo,
            taper_strength: s.taper_strength,
            image_stride: s.image_stride,
            top_mute: s.top_mute,
            direct_mute: s.direct_mute,
            vertical_filter: s.vertical_filter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LagSection {
    pub n_lag: usize,
    pub d_tau: f64,
}

impl Default for LagSection {
    fn default() -> Self {
        let l = LagAxis::default();
        Self { n_lag: l.n_lag, d_tau: l.d_tau }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_val: usize,
    /// Dataset directory; defaults to `<out_dir>/data`.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n_train: 64, n_val: 16, dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    pub modes: (usize, usize),
    pub lift: usize,
    pub encoder: [usize; 4],
    pub decoder: [usize; 4],
    pub attention: [bool; 4],
    pub blocks: usize,
    pub spectral: bool,
    /// Train on the zero-lag panel only.
    pub zero_lag: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_every: usize,
    pub checkpoint_every: usize,
}

impl Default for OperatorSection {
    fn default() -> Self {
        let a = OperatorArch::default();
        let t = TrainConfig::default();
        Self {
            modes: (a.modes.mz, a.modes.mx),
            lift: a.lift,
            encoder: a.encoder,
            decoder: a.decoder,
            attention: a.attention,
            blocks: a.blocks,
            spectral: a.spectral,
            zero_lag: false,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr.base,
            lr_factor: 1.0,
            lr_every: 1000,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpmSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub widths: [usize; 4],
    pub emb_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Number of unconditional samples drawn by `sample-ddpm`.
    pub samples: usize,
}

impl Default for DdpmSection {
    fn default() -> Self {
        let a = DenoiserArch::default();
        let t = DdpmTrainConfig::default();
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            widths: a.widths,
            emb_dim: a.emb_dim,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr.base,
            samples: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub iterations: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_every: usize,
    pub diffuse_every: usize,
    pub s_cond: usize,
    pub k_steps: usize,
    /// Validation record to invert when no explicit inputs are given.
    pub sample: usize,
    pub v_mig: Option<PathBuf>,
    pub image: Option<PathBuf>,
    /// Reference model for error reporting.
    pub v_true: Option<PathBuf>,
    pub overlap: f64,
    /// Columns whose vertical-profile spectra are written.
    pub spectrum_columns: Vec<usize>,
}

impl Default for InversionSection {
    fn default() -> Self {
        let c = InversionConfig::default();
        Self {
            iterations: c.iterations,
            lr: c.lr.base,
            lr_factor: c.lr.factor,
            lr_every: c.lr.every,
            diffuse_every: c.diffuse_every,
            s_cond: c.s_cond,
            k_steps: c.k_steps,
            sample: 0,
            v_mig: None,
            image: None,
            v_true: None,
            overlap: 0.5,
            spectrum_columns: vec![],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtmSection {
    /// Migration velocity; without it a model is drawn from the generator.
    pub v_mig: Option<PathBuf>,
    /// True velocity used to model the data.
    pub v_true: Option<PathBuf>,
    /// Recorded gathers, one per source, instead of modelling.
    pub gathers: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub input: Option<PathBuf>,
    /// Empty: the mean spectrum over all columns.
    pub columns: Vec<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.dataset.dir,
            &mut self.inversion.v_mig,
            &mut self.inversion.image,
            &mut self.inversion.v_true,
            &mut self.rtm.v_mig,
            &mut self.rtm.v_true,
            &mut self.spectrum.input,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.rtm.gathers.iter_mut().for_each(fix);
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn grid(&self) -> Result<Grid2D> {
        let g = &self.grid;
        Ok(Grid2D::new(g.nz, g.nx, g.dz, g.dx)?)
    }

    pub fn norm(&self) -> NormalizationSpec {
        NormalizationSpec { v_min: self.norm.v_min, v_max: self.norm.v_max, image_scale: 1.0 }
    }

    pub fn generator(&self) -> Result<ModelGenConfig> {
        let g = &self.generator;
        Ok(ModelGenConfig {
            grid: self.grid()?,
            layers: g.layers,
            v_top: g.v_top,
            v_bottom: g.v_bottom,
            jitter: g.jitter,
            fold_amplitude: g.fold_amplitude,
            fold_wavelength: g.fold_wavelength,
            fault_prob: g.fault_prob,
            max_throw: g.max_throw,
            salt_prob: g.salt_prob,
            salt_radius: g.salt_radius,
            salt_velocity: g.salt_velocity,
            smooth_sigma: g.smooth_sigma,
            norm: self.norm(),
            seed: self.seed,
        })
    }

    pub fn geometry_for(&self, grid: &Grid2D) -> Result<AcquisitionGeometry> {
        let g = &self.geometry;
        Ok(AcquisitionGeometry::surface(grid, g.sources, g.receivers, g.depth)?)
    }

    pub fn sim(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            nt: s.nt,
            dt: s.dt,
            f_peak: s.f_peak,
            halo: s.halo,
            taper_strength: s.taper_strength,
            image_stride: s.image_stride,
            top_mute: s.top_mute,
            direct_mute: s.direct_mute,
            vertical_filter: s.vertical_filter,
        }
    }

    pub fn lag(&self) -> LagAxis {
        LagAxis { n_lag: self.lag.n_lag, d_tau: self.lag.d_tau }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dataset.dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn operator_dir(&self) -> PathBuf {
        self.out_dir.join(if self.operator.zero_lag { "operator_zero_lag" } else { "operator" })
    }

    pub fn ddpm_dir(&self) -> PathBuf {
        self.out_dir.join("ddpm")
    }

    pub fn operator_arch(&self) -> Result<OperatorArch> {
        let o = &self.operator;
        let lag = if o.zero_lag { LagAxis { n_lag: 1, ..self.lag() } } else { self.lag() };
        let arch = OperatorArch {
            grid: self.grid()?,
            lag,
            modes: Modes { mz: o.modes.0, mx: o.modes.1 },
            lift: o.lift,
            encoder: o.encoder,
            decoder: o.decoder,
            attention: o.attention,
            blocks: o.blocks,
            spectral: o.spectral,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn operator_training(&self) -> Result<TrainConfig> {
        let o = &self.operator;
        let cfg = TrainConfig {
            epochs: o.epochs,
            batch_size: o.batch_size,
            lr: StepDecay { base: o.lr, factor: o.lr_factor, every: o.lr_every },
            seed: self.seed,
            checkpoint_every: o.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.ddpm;
        Ok(NoiseSchedule::linear(d.steps, d.beta_start, d.beta_end)?)
    }

    pub fn denoiser_arch(&self) -> Result<DenoiserArch> {
        let arch = DenoiserArch { grid: self.grid()?, widths: self.ddpm.widths, emb_dim: self.ddpm.emb_dim };
        arch.validate()?;
        Ok(arch)
    }

    pub fn ddpm_training(&self) -> DdpmTrainConfig {
        let d = &self.ddpm;
        DdpmTrainConfig { epochs: d.epochs, batch_size: d.batch_size, lr: StepDecay::constant(d.lr), seed: self.seed }
    }

    pub fn inversion(&self) -> Result<InversionConfig> {
        let i = &self.inversion;
        let cfg = InversionConfig {
            iterations: i.iterations,
            lr: StepDecay { base: i.lr, factor: i.lr_factor, every: i.lr_every },
            diffuse_every: i.diffuse_every,
            s_cond: i.s_cond,
            k_steps: i.k_steps,
            bounds: (0.0, 1.0),
            seed: self.seed,
        };
        cfg.validate()?;
        if !(0.0..1.0).contains(&i.overlap) {
            bail!("inversion.overlap = {} must lie in [0, 1)", i.overlap);
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_the_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.operator_arch().unwrap(), OperatorArch::default());
        assert_eq!(cfg.sim(), SimConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[operator]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.inversion.v_mig = Some("a/b.velb".into());
        cfg.generator.smooth_sigma = Some(3.0);
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg: RunConfig = toml::from_str("out_dir = \"out\"\n[rtm]\ngathers = [\"g0.velb\"]\n").unwrap();
        cfg.resolve_paths(Path::new("/runs/x"));
        assert_eq!(cfg.out_dir, PathBuf::from("/runs/x/out"));
        assert_eq!(cfg.rtm.gathers, vec![PathBuf::from("/runs/x/g0.velb")]);
    }
}
