use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmb_core::ddpm::{self, build_denoiser, ddpm_checkpoint_path, train_ddpm as fit_ddpm, DenoiserModel};
use vmb_core::domain::{
    read_grid, vertical_profile_spectrum, write_grid, write_spectra_csv, ExtendedImageVolume, NormalizationSpec,
    VelocityField,
};
use vmb_core::inversion::{
    invert_no, invert_no_ddpm, make_patch_plan, mean_vertical_spectrum, patch_invert, Prior,
};
use vmb_core::metrics::{rmse, total_variation};
use vmb_core::neural_op::{build_model, load_pairs, train_operator, HybridOperatorModel, TrainPaths};
use vmb_core::velgen::{build_dataset, gaussian_smooth, sample_model, Manifest, MANIFEST_FILE};
use vmb_core::wave_sim::{migrate_gathers, model_and_migrate};

use crate::config::RunConfig;
use crate::Common;

pub const CONFIG_FILE: &str = "config.toml";

/// Loads the configuration, applies the command-line overrides and runs `f`.
pub fn run(common: &Common, f: impl FnOnce(&RunConfig) -> Result<()>) -> Result<()> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("configuring worker threads")?;
    }
    f(&cfg)
}

/// 2 for numerical failures, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| c.downcast_ref::<vmb_core::Error>().is_some_and(vmb_core::Error::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn read_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.data_dir().join(MANIFEST_FILE);
    Manifest::read(&path).with_context(|| format!("reading dataset manifest {} (run gen-data first)", path.display()))
}

fn read_velocity(path: &Path, dz: f64, dx: f64) -> Result<VelocityField> {
    Ok(read_grid(path)?.into_velocity(dz, dx)?)
}

fn write_velocity(path: &Path, v: &VelocityField) -> Result<()> {
    write_grid(path, v).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let gen = cfg.generator()?;
    let geom = cfg.geometry_for(&gen.grid)?;
    let dir = cfg.data_dir();
    prepare_dir(&dir, cfg)?;
    let manifest = build_dataset(&gen, cfg.dataset.n_train, cfg.dataset.n_val, &geom, &cfg.lag(), &cfg.sim(), &dir)?;
    println!(
        "wrote {} samples ({} skipped) to {}, image scale {:e}",
        manifest.records.len(),
        manifest.skipped.len(),
        dir.display(),
        manifest.norm.image_scale
    );
    Ok(())
}

pub fn train_op(cfg: &RunConfig, resume: bool) -> Result<()> {
    let manifest = read_manifest(cfg)?;
    let arch = cfg.operator_arch()?;
    if !arch.grid.same_shape(&manifest.grid) {
        bail!("operator grid {}×{} differs from the dataset grid {}×{}", arch.grid.nz, arch.grid.nx, manifest.grid.nz, manifest.grid.nx);
    }
    let (train, val) = load_pairs(&manifest, arch.n_lag())?;
    let dir = cfg.operator_dir();
    prepare_dir(&dir, cfg)?;
    let mut model = build_model(&arch, cfg.seed)?;
    log::info!("operator with {} parameters, {} train / {} val samples", model.num_params(), train.len(), val.len());
    let log = train_operator(&mut model, &train, &val, &cfg.operator_training()?, &dir, resume)?;
    let (first, last) = (log.epochs.first(), log.epochs.last());
    if let (Some(first), Some(last)) = (first, last) {
        println!(
            "train loss {:.4e} -> {:.4e}, val loss {:.4e}, best val {:.4e}",
            first.train_loss,
            last.train_loss,
            last.val_loss,
            log.best_val().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn velocity_corpus(manifest: &Manifest) -> Result<Vec<Vec<f32>>> {
    manifest.train().map(|r| Ok(manifest.norm.normalize_velocity(&manifest.load(r)?.v_true))).collect()
}

pub fn train_ddpm(cfg: &RunConfig) -> Result<()> {
    let manifest = read_manifest(cfg)?;
    let arch = cfg.denoiser_arch()?;
    if !arch.grid.same_shape(&manifest.grid) {
        bail!("denoiser grid differs from the dataset grid");
    }
    let corpus = velocity_corpus(&manifest)?;
    let dir = cfg.ddpm_dir();
    prepare_dir(&dir, cfg)?;
    let mut model = build_denoiser(&arch, cfg.seed)?;
    log::info!("denoiser with {} parameters, {} training models", model.num_params(), corpus.len());
    let losses = fit_ddpm(&mut model, &corpus, &cfg.schedule()?, &cfg.ddpm_training(), &dir)?;
    println!("diffusion loss {:.4e} -> {:.4e}", losses[0], losses[losses.len() - 1]);
    Ok(())
}

fn load_denoiser(cfg: &RunConfig) -> Result<DenoiserModel> {
    let path = ddpm_checkpoint_path(&cfg.ddpm_dir());
    DenoiserModel::load(&path).with_context(|| format!("loading diffusion checkpoint {} (run train-ddpm first)", path.display()))
}

pub fn sample_ddpm(cfg: &RunConfig) -> Result<()> {
    let model = load_denoiser(cfg)?;
    let grid = model.arch.grid;
    let dir = cfg.ddpm_dir().join("samples");
    prepare_dir(&dir, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = ddpm::sample(&model, &cfg.schedule()?, cfg.ddpm.samples, grid.len(), &mut rng)?;
    let norm = cfg.norm();
    for (i, s) in samples.iter().enumerate() {
        let u: Vec<f32> = s.iter().map(|x| x.clamp(0.0, 1.0)).collect();
        write_velocity(&dir.join(format!("sample_{i:03}.velb")), &norm.denormalize_velocity(grid, &u))?;
    }
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

struct InversionInputs {
    v_mig: VelocityField,
    image: ExtendedImageVolume,
    v_true: Option<VelocityField>,
}

fn inversion_inputs(cfg: &RunConfig, manifest: &Manifest) -> Result<InversionInputs> {
    let inv = &cfg.inversion;
    let g = manifest.grid;
    match (&inv.v_mig, &inv.image) {
        (Some(vm), Some(img)) => {
            let v_mig = read_velocity(vm, g.dz, g.dx)?;
            let image = read_grid(img)?.into_image(g.dz, g.dx, manifest.lag.d_tau)?;
            let v_true = inv.v_true.as_deref().map(|p| read_velocity(p, g.dz, g.dx)).transpose()?;
            Ok(InversionInputs { v_mig, image, v_true })
        }
        (None, None) => {
            let rec = manifest.val().nth(inv.sample).with_context(|| {
                format!("inversion.sample = {} but the dataset has {} validation samples", inv.sample, manifest.val().count())
            })?;
            let s = manifest.load(rec)?;
            Ok(InversionInputs { v_mig: s.v_mig, image: s.label, v_true: Some(s.v_true) })
        }
        _ => bail!("inversion.v_mig and inversion.image must be given together"),
    }
}

pub fn invert(cfg: &RunConfig, with_ddpm: bool, patched: bool) -> Result<()> {
    let manifest = read_manifest(cfg)?;
    let norm: NormalizationSpec = manifest.norm;
    let ck = TrainPaths { dir: cfg.operator_dir() }.best();
    let model = HybridOperatorModel::load(&ck)
        .with_context(|| format!("loading operator checkpoint {} (run train-op first)", ck.display()))?;
    let inputs = inversion_inputs(cfg, &manifest)?;
    let mut image = inputs.image;
    if model.arch.n_lag() == 1 && image.n_lag > 1 {
        image = ExtendedImageVolume::new(image.grid, 1, image.d_tau, image.zero_lag().to_vec())?;
    }
    let inv_cfg = cfg.inversion()?;
    let denoiser = if with_ddpm { Some(load_denoiser(cfg)?) } else { None };
    let schedule = cfg.schedule()?;
    let prior = denoiser.as_ref().map(|d| Prior { denoiser: d, schedule: &schedule });

    let mut name = String::from("invert");
    if with_ddpm {
        name.push_str("_ddpm");
    }
    if patched {
        name.push_str("_patched");
    }
    let dir = cfg.out_dir.join(name);
    prepare_dir(&dir, cfg)?;

    let (velocity, loss_csv) = if patched {
        let a = model.arch.grid;
        let plan = make_patch_plan(inputs.v_mig.grid, a.nz, a.nx, cfg.inversion.overlap)?;
        log::info!("{} patches of {}×{}", plan.origins.len(), a.nz, a.nx);
        let r = patch_invert(&model, prior, &inputs.v_mig, &image, &plan, &norm, &inv_cfg)?;
        let csv = r.loss_csv();
        (r.velocity, csv)
    } else {
        let r = match prior {
            Some(p) => invert_no_ddpm(&model, p, &inputs.v_mig, &image, &norm, &inv_cfg)?,
            None => invert_no(&model, &inputs.v_mig, &image, &norm, &inv_cfg)?,
        };
        let csv = r.loss_csv();
        (r.velocity, csv)
    };

    write_velocity(&dir.join("v_inverted.velb"), &velocity)?;
    let loss_path = dir.join("loss.csv");
    fs::write(&loss_path, loss_csv).with_context(|| format!("writing {}", loss_path.display()))?;
    write_spectra(&dir, &inputs.v_mig, &velocity, inputs.v_true.as_ref(), &cfg.inversion.spectrum_columns)?;

    let g = velocity.grid;
    let mut summary = String::from("metric,value\n");
    let tv = |v: &VelocityField| total_variation(&norm.normalize_velocity(v), g.nz, g.nx);
    summary.push_str(&format!("tv_initial,{:e}\ntv_inverted,{:e}\n", tv(&inputs.v_mig), tv(&velocity)));
    if let Some(vt) = &inputs.v_true {
        let (before, after) = (rmse(&inputs.v_mig.values, &vt.values), rmse(&velocity.values, &vt.values));
        summary.push_str(&format!("rmse_initial,{before:e}\nrmse_inverted,{after:e}\n"));
        println!("RMSE to the true model: {before:.2} -> {after:.2} m/s");
    }
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, summary).with_context(|| format!("writing {}", summary_path.display()))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn write_spectra(
    dir: &Path,
    initial: &VelocityField,
    inverted: &VelocityField,
    truth: Option<&VelocityField>,
    columns: &[usize],
) -> Result<()> {
    let mut mean = vec![("initial", mean_vertical_spectrum(initial)), ("inverted", mean_vertical_spectrum(inverted))];
    if let Some(t) = truth {
        mean.push(("true", mean_vertical_spectrum(t)));
    }
    let refs: Vec<_> = mean.iter().map(|(n, s)| (*n, s)).collect();
    write_spectra_csv(&dir.join("spectrum_mean.csv"), &refs)?;
    for &ix in columns {
        let mut cols = vec![
            ("initial", vertical_profile_spectrum(initial, ix)?),
            ("inverted", vertical_profile_spectrum(inverted, ix)?),
        ];
        if let Some(t) = truth {
            cols.push(("true", vertical_profile_spectrum(t, ix)?));
        }
        let refs: Vec<_> = cols.iter().map(|(n, s)| (*n, s)).collect();
        write_spectra_csv(&dir.join(format!("spectrum_col{ix}.csv")), &refs)?;
    }
    Ok(())
}

pub fn rtm(cfg: &RunConfig) -> Result<()> {
    let r = &cfg.rtm;
    let (dz, dx) = (cfg.grid.dz, cfg.grid.dx);
    let dir = cfg.out_dir.join("rtm");
    let (v_true, v_mig) = match (&r.v_true, &r.v_mig) {
        (vt, Some(vm)) => (vt.as_deref().map(|p| read_velocity(p, dz, dx)).transpose()?, read_velocity(vm, dz, dx)?),
        (None, None) => {
            let gen = cfg.generator()?;
            let v_true = sample_model(&gen, cfg.seed)?;
            let v_mig = gaussian_smooth(&v_true, gen.sigma())?;
            (Some(v_true), v_mig)
        }
        (Some(_), None) => bail!("rtm.v_true needs rtm.v_mig"),
    };
    let sim = cfg.sim();
    sim.check_model(&v_mig)?;
    if let Some(vt) = &v_true {
        sim.check_model(vt)?;
    }
    let geom = cfg.geometry_for(&v_mig.grid)?;
    let lag = cfg.lag();
    prepare_dir(&dir, cfg)?;
    let image = if r.gathers.is_empty() {
        let vt = v_true.as_ref().context("rtm needs rtm.v_true or recorded gathers")?;
        model_and_migrate(vt, &v_mig, &geom, &lag, &sim)?
    } else {
        let gathers = r
            .gathers
            .iter()
            .map(|p| Ok(read_grid(p)?.into_gather(sim.dt)?))
            .collect::<Result<Vec<_>>>()?;
        migrate_gathers(&v_mig, &gathers, &geom, &lag, &sim)?
    };
    if r.v_mig.is_none() {
        write_velocity(&dir.join("v_mig.velb"), &v_mig)?;
        if let Some(vt) = &v_true {
            write_velocity(&dir.join("v_true.velb"), vt)?;
        }
    }
    let path = dir.join("image.velb");
    write_grid(&path, &image).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn spectrum(cfg: &RunConfig) -> Result<()> {
    let input: &PathBuf = cfg.spectrum.input.as_ref().context("spectrum.input is not set")?;
    let v = read_velocity(input, cfg.grid.dz, cfg.grid.dx)?;
    let dir = cfg.out_dir.join("spectrum");
    prepare_dir(&dir, cfg)?;
    let mean = mean_vertical_spectrum(&v);
    write_spectra_csv(&dir.join("spectrum_mean.csv"), &[("amplitude", &mean)])?;
    for &ix in &cfg.spectrum.columns {
        let s = vertical_profile_spectrum(&v, ix)?;
        write_spectra_csv(&dir.join(format!("spectrum_col{ix}.csv")), &[("amplitude", &s)])?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
