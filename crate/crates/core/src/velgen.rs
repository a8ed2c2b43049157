//! Synthetic velocity models and training datasets.
//!
//! Models are flat-layered with a velocity trend increasing with depth,
//! gently folded interfaces, an optional normal fault and an optional
//! elliptical salt body. Migration models are Gaussian-smoothed copies.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{
    percentile_abs, read_grid, write_grid, AcquisitionGeometry, ExtendedImageVolume, Grid2D, NormalizationSpec,
    VelocityField,
};
use crate::error::{invalid, Error, Result};
use crate::wave_sim::{model_and_migrate, LagAxis, SimConfig};

/// Inclusive `(lo, hi)` ranges throughout; depths and lengths are in grid
/// points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelGenConfig {
    pub grid: Grid2D,
    pub layers: (usize, usize),
    pub v_top: (f64, f64),
    pub v_bottom: (f64, f64),
    /// Half-width of the uniform per-layer velocity perturbation, m/s.
    pub jitter: f64,
    pub fold_amplitude: (f64, f64),
    pub fold_wavelength: (f64, f64),
    pub fault_prob: f64,
    pub max_throw: f64,
    pub salt_prob: f64,
    pub salt_radius: (f64, f64),
    pub salt_velocity: f64,
    /// Migration-model smoothing; `None` uses [`default_sigma`].
    pub smooth_sigma: Option<f64>,
    pub norm: NormalizationSpec,
    pub seed: u64,
}

impl Default for ModelGenConfig {
    fn default() -> Self {
        Self {
            grid: Grid2D { nz: 64, nx: 128, dz: 10.0, dx: 10.0 },
            layers: (4, 8),
            v_top: (1650.0, 2100.0),
            v_bottom: (2800.0, 3800.0),
            jitter: 150.0,
            fold_amplitude: (0.0, 4.0),
            fold_wavelength: (64.0, 256.0),
            fault_prob: 0.3,
            max_throw: 5.0,
            salt_prob: 0.2,
            salt_radius: (5.0, 10.0),
            salt_velocity: 4400.0,
            smooth_sigma: None,
            norm: NormalizationSpec::default(),
            seed: 1234,
        }
    }
}

fn range_ok(r: (f64, f64)) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1
}

impl ModelGenConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.norm.validate()?;
        let bad = |msg: String| Err(invalid("model generator config", msg));
        if self.layers.0 == 0 || self.layers.0 > self.layers.1 {
            return bad(format!("layer count range {:?}", self.layers));
        }
        for (name, r) in [
            ("v_top", self.v_top),
            ("v_bottom", self.v_bottom),
            ("fold_amplitude", self.fold_amplitude),
            ("fold_wavelength", self.fold_wavelength),
            ("salt_radius", self.salt_radius),
        ] {
            if !range_ok(r) || r.0 < 0.0 {
                return bad(format!("{name} range {r:?}"));
            }
        }
        if self.fold_wavelength.0 <= 0.0 || self.salt_radius.0 <= 0.0 {
            return bad("fold wavelength and salt radius must be positive".into());
        }
        for (name, p) in [("fault_prob", self.fault_prob), ("salt_prob", self.salt_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.jitter >= 0.0) || !(self.max_throw >= 0.0) {
            return bad("jitter and max_throw must be non-negative".into());
        }
        let lo = self.v_top.0.min(self.v_bottom.0) - self.jitter;
        let hi = self.v_top.1.max(self.v_bottom.1) + self.jitter;
        let (v_min, v_max) = (self.norm.v_min, self.norm.v_max);
        if lo < v_min || hi > v_max || self.salt_velocity < v_min || self.salt_velocity > v_max {
            return bad(format!("velocities [{lo}, {hi}] / salt {} exceed [{v_min}, {v_max}]", self.salt_velocity));
        }
        if let Some(s) = self.smooth_sigma {
            if !(s > 0.0) {
                return bad(format!("smooth_sigma = {s}"));
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.smooth_sigma.unwrap_or_else(|| default_sigma(&self.grid))
    }
}

/// 15 grid points at 128 rows, scaled with the row count.
pub fn default_sigma(grid: &Grid2D) -> f64 {
    15.0 * grid.nz as f64 / 128.0
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// One model per seed; `cfg.seed` is ignored in favour of `seed`.
pub fn sample_model(cfg: &ModelGenConfig, seed: u64) -> Result<VelocityField> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Grid2D { nz, nx, .. } = cfg.grid;
    let (nzf, nxf) = (nz as f64, nx as f64);

    let n_layers = rng.random_range(cfg.layers.0..=cfg.layers.1);
    let mut bases: Vec<f64> = (1..n_layers).map(|_| rng.random_range(0.08 * nzf..0.95 * nzf)).collect();
    bases.sort_by(f64::total_cmp);

    let v_top = uniform(&mut rng, cfg.v_top);
    let v_bottom = uniform(&mut rng, cfg.v_bottom);
    let mut edges = vec![0.0];
    edges.extend(&bases);
    edges.push(nzf);
    let velocity: Vec<f64> = edges
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]) / nzf;
            let j = if cfg.jitter > 0.0 { rng.random_range(-cfg.jitter..cfg.jitter) } else { 0.0 };
            v_top + (v_bottom - v_top) * mid + j
        })
        .collect();

    let amp = uniform(&mut rng, cfg.fold_amplitude);
    let wavelength = uniform(&mut rng, cfg.fold_wavelength);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let fault = rng.random_bool(cfg.fault_prob).then(|| {
        let x0 = rng.random_range(0.25 * nxf..0.75 * nxf);
        let dip = rng.random_range(10f64..35.0).to_radians() * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let throw = uniform(&mut rng, (-cfg.max_throw, cfg.max_throw));
        (x0, dip.tan(), throw)
    });

    let salt = rng.random_bool(cfg.salt_prob).then(|| {
        let r = uniform(&mut rng, cfg.salt_radius);
        let cz = rng.random_range(0.45 * nzf..0.8 * nzf);
        let cx = rng.random_range(0.2 * nxf..0.8 * nxf);
        let stretch = rng.random_range(1.0..2.0);
        (cz, cx, r, r * stretch)
    });

    let mut values = vec![0f32; nz * nx];
    for ix in 0..nx {
        let x = ix as f64;
        let fold = amp * (std::f64::consts::TAU * x / wavelength + phase).sin();
        for iz in 0..nz {
            let z = iz as f64;
            let shift = match fault {
                Some((x0, slope, throw)) if x > x0 + (z - 0.5 * nzf) * slope => throw,
                _ => 0.0,
            };
            let layer = bases
                .iter()
                .filter(|&&b| z >= b + fold * (0.5 + b / nzf) + shift)
                .count();
            let mut v = velocity[layer];
            if let Some((cz, cx, rz, rx)) = salt {
                if ((z - cz) / rz).powi(2) + ((x - cx) / rx).powi(2) <= 1.0 {
                    v = cfg.salt_velocity;
                }
            }
            values[iz * nx + ix] = v as f32;
        }
    }
    VelocityField::new(cfg.grid, values)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Convolves `n` lines of length `len` (element `j` of line `i` at
/// `i·line_stride + j·step`) with `kernel`, replicating edge samples.
fn convolve_lines(src: &[f64], dst: &mut [f64], n: usize, len: usize, line_stride: usize, step: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    for i in 0..n {
        let base = i * line_stride;
        for j in 0..len {
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let k = (j as isize + t as isize - r).clamp(0, len as isize - 1) as usize;
                acc += w * src[base + k * step];
            }
            dst[base + j * step] = acc;
        }
    }
}

/// Separable Gaussian blur with edge replication, truncated at 4σ.
pub fn gaussian_smooth(v: &VelocityField, sigma: f64) -> Result<VelocityField> {
    if !(sigma > 0.0) {
        return Err(invalid("smoothing", format!("sigma = {sigma} must be positive")));
    }
    let Grid2D { nz, nx, .. } = v.grid;
    let kernel = gaussian_kernel(sigma);
    let a: Vec<f64> = v.values.iter().map(|&x| x as f64).collect();
    let mut b = vec![0.0; a.len()];
    convolve_lines(&a, &mut b, nx, nz, 1, nx, &kernel);
    let mut c = vec![0.0; a.len()];
    convolve_lines(&b, &mut c, nz, nx, nx, 1, &kernel);
    VelocityField::new(v.grid, c.into_iter().map(|x| x as f32).collect())
}

/// A training triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub v_true: VelocityField,
    pub v_mig: VelocityField,
    pub label: ExtendedImageVolume,
}

pub fn make_sample(
    cfg: &ModelGenConfig,
    seed: u64,
    geom: &AcquisitionGeometry,
    lag: &LagAxis,
    sim: &SimConfig,
) -> Result<DatasetSample> {
    let v_true = sample_model(cfg, seed)?;
    let v_mig = gaussian_smooth(&v_true, cfg.sigma())?;
    let label = model_and_migrate(&v_true, &v_mig, geom, lag, sim)?;
    Ok(DatasetSample { v_true, v_mig, label })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub idx: usize,
    pub v_true: PathBuf,
    pub v_mig: PathBuf,
    pub label: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedSample {
    pub idx: usize,
    pub seed: u64,
    pub reason: String,
}

/// Dataset index. Record paths are relative to `root`, the manifest's
/// directory; indices below `n_train` are training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub grid: Grid2D,
    pub lag: LagAxis,
    pub norm: NormalizationSpec,
    pub sim: SimConfig,
    pub geom: AcquisitionGeometry,
    pub sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub master_seed: u64,
    pub records: Vec<ManifestRecord>,
    pub skipped: Vec<SkippedSample>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
const COLUMNS: &str = "idx,v_true_path,v_mig_path,label_path,seed";
const GENERATOR: &str = "layered+fold+fault+salt(parametric)";

fn positions(p: &[(usize, usize)]) -> String {
    p.iter().map(|(z, x)| format!("{z}:{x}")).collect::<Vec<_>>().join(";")
}

impl Manifest {
    pub fn train(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.idx < self.n_train)
    }

    pub fn val(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.idx >= self.n_train)
    }

    pub fn load(&self, rec: &ManifestRecord) -> Result<DatasetSample> {
        let (dz, dx) = (self.grid.dz, self.grid.dx);
        let read = |p: &Path| read_grid(&self.root.join(p));
        Ok(DatasetSample {
            v_true: read(&rec.v_true)?.into_velocity(dz, dx)?,
            v_mig: read(&rec.v_mig)?.into_velocity(dz, dx)?,
            label: read(&rec.label)?.into_image(dz, dx, self.lag.d_tau)?,
        })
    }

    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let s = &self.sim;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# nz={} nx={} dz={} dx={} n_lag={} d_tau={} v_min={} v_max={} image_scale={} sigma={} \
             n_train={} n_val={} master_seed={} nt={} dt={} f_peak={} halo={} taper={} stride={} top_mute={} direct_mute={} vertical_filter={} \
             sources={} receivers={} generator={}",
            g.nz,
            g.nx,
            g.dz,
            g.dx,
            self.lag.n_lag,
            self.lag.d_tau,
            self.norm.v_min,
            self.norm.v_max,
            self.norm.image_scale,
            self.sigma,
            self.n_train,
            self.n_val,
            self.master_seed,
            s.nt,
            s.dt,
            s.f_peak,
            s.halo,
            s.taper_strength,
            s.image_stride,
            s.top_mute,
            s.direct_mute,
            s.vertical_filter,
            positions(&self.geom.sources),
            positions(&self.geom.receivers),
            GENERATOR,
        );
        let _ = writeln!(out, "{COLUMNS}");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.idx,
                r.v_true.display(),
                r.v_mig.display(),
                r.label.display(),
                r.seed
            );
        }
        for k in &self.skipped {
            let _ = writeln!(out, "#skip idx={} seed={} reason={}", k.idx, k.seed, k.reason.replace('\n', " "));
        }
        out
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        parse_manifest(&text, root, path)
    }
}

fn parse_manifest(text: &str, root: PathBuf, path: &Path) -> Result<Manifest> {
    let err = |line: usize, msg: String| Error::Manifest { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
    let header = header.strip_prefix("# ").ok_or_else(|| err(1, "missing metadata header".into()))?;
    let kv: std::collections::HashMap<&str, &str> = header.split_whitespace().filter_map(|t| t.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| err(1, format!("missing `{k}`")));
    macro_rules! num {
        ($k:expr) => {
            get($k)?.parse().map_err(|_| err(1, format!("bad value for `{}`", $k)))?
        };
    }
    let parse_pos = |k: &str| -> Result<Vec<(usize, usize)>> {
        get(k)?
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|p| {
                p.split_once(':')
                    .and_then(|(z, x)| Some((z.parse().ok()?, x.parse().ok()?)))
                    .ok_or_else(|| err(1, format!("bad position `{p}` in `{k}`")))
            })
            .collect()
    };
    let grid = Grid2D::new(num!("nz"), num!("nx"), num!("dz"), num!("dx"))?;
    let mut m = Manifest {
        root,
        grid,
        lag: LagAxis { n_lag: num!("n_lag"), d_tau: num!("d_tau") },
        norm: NormalizationSpec { v_min: num!("v_min"), v_max: num!("v_max"), image_scale: num!("image_scale") },
        sim: SimConfig {
            nt: num!("nt"),
            dt: num!("dt"),
            f_peak: num!("f_peak"),
            halo: num!("halo"),
            taper_strength: num!("taper"),
            image_stride: num!("stride"),
            top_mute: num!("top_mute"),
            direct_mute: num!("direct_mute"),
            vertical_filter: num!("vertical_filter"),
        },
        geom: AcquisitionGeometry { sources: parse_pos("sources")?, receivers: parse_pos("receivers")? },
        sigma: num!("sigma"),
        n_train: num!("n_train"),
        n_val: num!("n_val"),
        master_seed: num!("master_seed"),
        records: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() || line == COLUMNS {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#skip ") {
            let mut f = rest.splitn(3, ' ');
            let mut field = |k: &str| {
                f.next()
                    .and_then(|t| t.strip_prefix(k))
                    .map(str::to_string)
                    .ok_or_else(|| err(n, format!("bad skip record, expected `{k}`")))
            };
            let idx = field("idx=")?.parse().map_err(|_| err(n, "bad skip idx".into()))?;
            let seed = field("seed=")?.parse().map_err(|_| err(n, "bad skip seed".into()))?;
            let reason = field("reason=")?;
            m.skipped.push(SkippedSample { idx, seed, reason });
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(n, format!("expected 5 fields, found {}", f.len())));
        }
        m.records.push(ManifestRecord {
            idx: f[0].parse().map_err(|_| err(n, format!("bad idx `{}`", f[0])))?,
            v_true: f[1].into(),
            v_mig: f[2].into(),
            label: f[3].into(),
            seed: f[4].parse().map_err(|_| err(n, format!("bad seed `{}`", f[4])))?,
        });
    }
    Ok(m)
}

/// Generates `n_train + n_val` samples into `out_dir` and writes the
/// manifest there. Sample `i` uses seed `cfg.seed + i`. The image scale is
/// the 99th percentile of |label| over the training split.
pub fn build_dataset(
    cfg: &ModelGenConfig,
    n_train: usize,
    n_val: usize,
    geom: &AcquisitionGeometry,
    lag: &LagAxis,
    sim: &SimConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    geom.validate(&cfg.grid)?;
    lag.steps(sim)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut m = Manifest {
        root: out_dir.to_path_buf(),
        grid: cfg.grid,
        lag: *lag,
        norm: cfg.norm,
        sim: *sim,
        geom: geom.clone(),
        sigma: cfg.sigma(),
        n_train,
        n_val,
        master_seed: cfg.seed,
        records: Vec::new(),
        skipped: Vec::new(),
    };
    let mut train_amplitudes = Vec::new();
    for idx in 0..n_train + n_val {
        let seed = cfg.seed.wrapping_add(idx as u64);
        let sample = match make_sample(cfg, seed, geom, lag, sim) {
            Ok(s) => s,
            Err(e) if e.is_numerical() => {
                log::warn!("sample {idx} (seed {seed}) skipped: {e}");
                m.skipped.push(SkippedSample { idx, seed, reason: e.to_string() });
                continue;
            }
            Err(e) => return Err(e),
        };
        let rec = ManifestRecord {
            idx,
            v_true: format!("{idx:05}_vtrue.velb").into(),
            v_mig: format!("{idx:05}_vmig.velb").into(),
            label: format!("{idx:05}_label.velb").into(),
            seed,
        };
        write_grid(&out_dir.join(&rec.v_true), &sample.v_true)?;
        write_grid(&out_dir.join(&rec.v_mig), &sample.v_mig)?;
        write_grid(&out_dir.join(&rec.label), &sample.label)?;
        if idx < n_train {
            train_amplitudes.extend_from_slice(&sample.label.values);
        }
        log::info!("sample {idx} written (seed {seed})");
        m.records.push(rec);
    }
    let scale = percentile_abs(train_amplitudes, 0.99);
    if scale > 0.0 {
        // A power of two makes image normalization exactly invertible.
        m.norm.image_scale = 2f64.powi(scale.log2().round() as i32);
    }
    m.write()?;
    Ok(m)
}
