use proptest::prelude::*;
use vmb_autodiff::{Modes, StepDecay};
use vmb_core::ddpm::{NoisePredictor, NoiseSchedule};
use vmb_core::domain::{ExtendedImageVolume, Grid2D, NormalizationSpec, VelocityField};
use vmb_core::inversion::{
    invert_no, invert_no_ddpm, make_patch_plan, mid_band, patch_invert, zero_lag_ablation, InversionConfig, Prior,
};
use vmb_core::neural_op::{build_model, HybridOperatorModel, OperatorArch};
use vmb_core::wave_sim::LagAxis;

fn arch(n_lag: usize) -> OperatorArch {
    OperatorArch {
        grid: Grid2D { nz: 16, nx: 32, dz: 10.0, dx: 10.0 },
        lag: LagAxis { n_lag, d_tau: 8e-3 },
        modes: Modes { mz: 3, mx: 4 },
        lift: 4,
        encoder: [4, 6, 8, 8],
        decoder: [8, 6, 4, 4],
        ..Default::default()
    }
}

fn norm() -> NormalizationSpec {
    NormalizationSpec { image_scale: 1.0, ..Default::default() }
}

fn ramp(grid: Grid2D) -> VelocityField {
    let values = (0..grid.len()).map(|i| 1800.0 + 20.0 * (i / grid.nx) as f32 + (i % 7) as f32).collect();
    VelocityField::new(grid, values).unwrap()
}

fn target(model: &HybridOperatorModel, v_true: &VelocityField, v_mig: &VelocityField, n: &NormalizationSpec) -> ExtendedImageVolume {
    let out = model.forward(&n.normalize_velocity(v_true), &n.normalize_velocity(v_mig)).unwrap();
    ExtendedImageVolume { values: n.denormalize_image(&out.values), ..out }
}

fn short(iterations: usize) -> InversionConfig {
    InversionConfig { iterations, diffuse_every: 0, ..Default::default() }
}

#[test]
fn self_consistent_target_is_a_fixed_point() {
    let model = build_model(&arch(3), 1).unwrap();
    let v_mig = ramp(model.arch.grid);
    let obs = target(&model, &v_mig, &v_mig, &norm());
    let r = invert_no(&model, &v_mig, &obs, &norm(), &short(30)).unwrap();
    assert!(r.history[0].loss < 1e-12, "{}", r.history[0].loss);
    let num: f64 = r.velocity.values.iter().zip(&v_mig.values).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    let den: f64 = v_mig.values.iter().map(|&b| (b as f64).powi(2)).sum();
    assert!((num / den).sqrt() < 1e-3);
}

#[test]
fn loss_falls_towards_a_reachable_target() {
    let model = build_model(&arch(3), 2).unwrap();
    let v_mig = ramp(model.arch.grid);
    let mut v_true = v_mig.clone();
    v_true.values.iter_mut().skip(8 * 32).for_each(|v| *v += 400.0);
    let obs = target(&model, &v_true, &v_mig, &norm());
    let before = model.params.clone();
    let r = invert_no(&model, &v_mig, &obs, &norm(), &short(60)).unwrap();
    assert_eq!(model.params, before);
    let (first, last) = (r.history[0].loss, r.history.last().unwrap().loss);
    assert!(last < 0.5 * first, "{first} → {last}");
    assert!(r.normalized.iter().all(|&x| (0.0..=1.0).contains(&x)));
    let csv = r.loss_csv();
    assert!(csv.starts_with("iter,loss,lr,refined\n"));
    assert_eq!(csv.lines().count(), 61);
}

/// Predicts a constant noise field so refinement visibly changes the iterate.
struct Shift;

impl NoisePredictor for Shift {
    fn predict_noise(&self, v: &[f32], _: usize, _: usize) -> vmb_core::Result<Vec<f32>> {
        Ok(vec![0.2; v.len()])
    }
}

#[test]
fn disabled_diffusion_reproduces_the_plain_inversion() {
    let model = build_model(&arch(3), 3).unwrap();
    let v_mig = ramp(model.arch.grid);
    let mut v_true = v_mig.clone();
    v_true.values.iter_mut().take(100).for_each(|v| *v -= 200.0);
    let obs = target(&model, &v_true, &v_mig, &norm());
    let sched = NoiseSchedule::default();
    let prior = Prior { denoiser: &Shift, schedule: &sched };
    let plain = invert_no(&model, &v_mig, &obs, &norm(), &short(20)).unwrap();
    let off = invert_no_ddpm(&model, prior, &v_mig, &obs, &norm(), &short(20)).unwrap();
    assert_eq!(plain, off);

    let cfg = InversionConfig { iterations: 20, diffuse_every: 7, ..Default::default() };
    let on = invert_no_ddpm(&model, prior, &v_mig, &obs, &norm(), &cfg).unwrap();
    let flags: Vec<usize> = on.history.iter().filter(|h| h.refined).map(|h| h.iter).collect();
    assert_eq!(flags, vec![6, 13]);
    assert_ne!(on.normalized, plain.normalized);
    assert!(on.normalized.iter().all(|&x| (0.0..=1.0).contains(&x)));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let model = build_model(&arch(3), 0).unwrap();
    let v_mig = ramp(Grid2D { nz: 16, nx: 16, dz: 10.0, dx: 10.0 });
    let obs = ExtendedImageVolume::zeros(v_mig.grid, 3, 8e-3);
    assert!(invert_no(&model, &v_mig, &obs, &norm(), &short(1)).is_err());
    let v_mig = ramp(model.arch.grid);
    let obs = ExtendedImageVolume::zeros(v_mig.grid, 1, 8e-3);
    assert!(invert_no(&model, &v_mig, &obs, &norm(), &short(1)).is_err());
    let bad = InversionConfig { lr: StepDecay { base: 0.01, factor: 1.5, every: 100 }, ..short(1) };
    assert!(invert_no(&model, &v_mig, &ExtendedImageVolume::zeros(v_mig.grid, 3, 8e-3), &norm(), &bad).is_err());
}

#[test]
fn ablation_report_lists_three_aligned_spectra() {
    let (lag, zero) = (build_model(&arch(3), 4).unwrap(), build_model(&arch(1), 4).unwrap());
    let v_mig = ramp(lag.arch.grid);
    let obs = target(&lag, &v_mig, &v_mig, &norm());
    let report = zero_lag_ablation(&lag, &zero, &v_mig, &obs, &norm(), &short(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spectra.csv");
    report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("wavenumber,initial,zero_lag,time_lag\n"));
    assert_eq!(text.lines().count(), 1 + 16 / 2 + 1);
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 4));
    let w = report.lag_wins();
    assert!((0.0..=1.0).contains(&w));
    assert_eq!(mid_band(64), 4..=16);
    assert!(zero_lag_ablation(&lag, &lag, &v_mig, &obs, &norm(), &short(1)).is_err());
}

#[test]
fn single_patch_plan_matches_direct_inversion_bitwise() {
    let model = build_model(&arch(3), 5).unwrap();
    let v_mig = ramp(model.arch.grid);
    let mut v_true = v_mig.clone();
    v_true.values.iter_mut().skip(200).for_each(|v| *v += 300.0);
    let obs = target(&model, &v_true, &v_mig, &norm());
    let plan = make_patch_plan(model.arch.grid, 16, 32, 0.5).unwrap();
    let direct = invert_no(&model, &v_mig, &obs, &norm(), &short(10)).unwrap();
    let patched = patch_invert(&model, None, &v_mig, &obs, &plan, &norm(), &short(10)).unwrap();
    assert_eq!(patched.velocity, direct.velocity);
    assert_eq!(patched.loss_csv(), direct.loss_csv());
}

#[test]
fn wide_models_are_inverted_patch_by_patch() {
    let model = build_model(&arch(3), 6).unwrap();
    let big = Grid2D { nz: 16, nx: 64, dz: 10.0, dx: 10.0 };
    let v_mig = ramp(big);
    let obs = ExtendedImageVolume::zeros(big, 3, 8e-3);
    let plan = make_patch_plan(big, 16, 32, 0.5).unwrap();
    assert_eq!(plan.origins, vec![(0, 0), (0, 16), (0, 32)]);
    let out = patch_invert(&model, None, &v_mig, &obs, &plan, &norm(), &short(3)).unwrap();
    assert_eq!(out.histories.len(), 3);
    let out = out.velocity;
    assert_eq!(out.grid, big);
    assert!(out.values.iter().all(|v| v.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn patch_weights_partition_unity(
        nz in 8usize..80, nx in 8usize..160, fz in 0.05f64..1.0, fx in 0.05f64..1.0, overlap in 0.0f64..0.95,
    ) {
        let grid = Grid2D { nz, nx, dz: 10.0, dx: 10.0 };
        let (pz, px) = (((nz as f64 * fz).ceil() as usize).max(1), ((nx as f64 * fx).ceil() as usize).max(1));
        let plan = make_patch_plan(grid, pz, px, overlap).unwrap();
        for c in plan.coverage() {
            prop_assert!((c - 1.0).abs() <= 1e-6, "coverage {}", c);
        }
    }
}
