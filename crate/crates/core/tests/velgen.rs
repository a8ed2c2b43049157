use proptest::prelude::*;
use vmb_core::domain::{profile_spectrum, read_grid, AcquisitionGeometry, Grid2D, VelocityField};
use vmb_core::metrics::{correlation, total_variation};
use vmb_core::velgen::{build_dataset, gaussian_smooth, make_sample, sample_model, Manifest, ModelGenConfig, MANIFEST_FILE};
use vmb_core::wave_sim::{model_and_migrate, LagAxis, SimConfig};

fn mean(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64
}

fn row_mean(v: &VelocityField, iz: usize) -> f64 {
    mean(&v.values[iz * v.grid.nx..(iz + 1) * v.grid.nx])
}

fn profile_field(profile: &[f64], nx: usize) -> VelocityField {
    let grid = Grid2D::new(profile.len(), nx, 10.0, 10.0).unwrap();
    let values = profile.iter().flat_map(|&p| std::iter::repeat_n(p as f32, nx)).collect();
    VelocityField::new(grid, values).unwrap()
}

#[test]
fn velocity_increases_with_depth_on_average() {
    let cfg = ModelGenConfig::default();
    let (mut top, mut bottom) = (0.0, 0.0);
    for seed in 0..1000 {
        let v = sample_model(&cfg, seed).unwrap();
        top += row_mean(&v, 0);
        bottom += row_mean(&v, v.grid.nz - 1);
    }
    assert!(bottom > top, "bottom {bottom} top {top}");
}

#[test]
fn step_becomes_a_monotone_ramp() {
    let profile: Vec<f64> = (0..128).map(|i| if i < 64 { 2000.0 } else { 3000.0 }).collect();
    let v = profile_field(&profile, 8);
    let s = gaussian_smooth(&v, 15.0).unwrap();
    let col = s.column(3);
    let grad: Vec<f64> = col.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    assert!(grad.iter().all(|&g| g >= -1e-3), "ramp not monotone");
    let max_after = grad.iter().cloned().fold(0.0, f64::max);
    assert!(max_after * 5.0 <= 1000.0, "max gradient {max_after}");
}

#[test]
fn smoothing_matches_the_gaussian_transfer_function() {
    // Long profile so the replicated edges are a small fraction of it.
    let (nz, sigma) = (1024usize, 4.0);
    let bins = [24usize, 36, 48, 60, 72];
    let profile: Vec<f64> = (0..nz)
        .map(|i| {
            let z = i as f64 / nz as f64;
            2500.0 + bins.iter().map(|&k| 50.0 * (std::f64::consts::TAU * k as f64 * z).cos()).sum::<f64>()
        })
        .collect();
    let v = profile_field(&profile, 8);
    let s = gaussian_smooth(&v, sigma).unwrap();
    let before = profile_spectrum(&profile, 10.0);
    let after_profile: Vec<f64> = s.column(0).iter().map(|&x| x as f64).collect();
    let after = profile_spectrum(&after_profile, 10.0);
    for &k in &bins {
        let expected = (-2.0 * std::f64::consts::PI.powi(2) * sigma * sigma * (k * k) as f64 / (nz * nz) as f64).exp();
        let ratio = after.amplitude[k] / before.amplitude[k];
        assert!((ratio / expected - 1.0).abs() < 0.10, "bin {k}: {ratio} vs {expected}");
    }
}

#[test]
fn smoothing_preserves_the_mean_of_generated_models() {
    let cfg = ModelGenConfig::default();
    for seed in 0..20 {
        let v = sample_model(&cfg, seed).unwrap();
        let s = gaussian_smooth(&v, cfg.sigma()).unwrap();
        let (a, b) = (mean(&v.values), mean(&s.values));
        assert!((a - b).abs() <= 0.005 * a, "seed {seed}: {a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoothing_never_adds_variation_to_profiles(
        profile in prop::collection::vec(1500.0f64..4500.0, 8..80),
        sigma in 0.5f64..12.0,
    ) {
        let v = profile_field(&profile, 8);
        let s = gaussian_smooth(&v, sigma).unwrap();
        let (nz, nx) = (v.grid.nz, v.grid.nx);
        let (a, b) = (total_variation(&v.values, nz, nx), total_variation(&s.values, nz, nx));
        prop_assert!(b <= a * (1.0 + 1e-6) + 1e-3, "{} > {}", b, a);
    }

    #[test]
    fn smoothing_never_adds_variation_to_generated_models(seed in 0u64..10_000, sigma in 1.0f64..10.0) {
        let v = sample_model(&ModelGenConfig::default(), seed).unwrap();
        let s = gaussian_smooth(&v, sigma).unwrap();
        let (nz, nx) = (v.grid.nz, v.grid.nx);
        prop_assert!(total_variation(&s.values, nz, nx) <= total_variation(&v.values, nz, nx));
    }
}

struct Setup {
    cfg: ModelGenConfig,
    geom: AcquisitionGeometry,
    lag: LagAxis,
    sim: SimConfig,
}

fn setup() -> Setup {
    let cfg = ModelGenConfig { salt_prob: 0.0, fault_prob: 0.0, seed: 500, ..Default::default() };
    let geom = AcquisitionGeometry::surface(&cfg.grid, 4, 64, 2).unwrap();
    Setup { cfg, geom, lag: LagAxis::default(), sim: SimConfig::default() }
}

#[test]
fn dataset_build_is_listed_reproducible_and_physical() {
    let s = setup();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = build_dataset(&s.cfg, 2, 1, &s.geom, &s.lag, &s.sim, d1.path()).unwrap();
    let m2 = build_dataset(&s.cfg, 2, 1, &s.geom, &s.lag, &s.sim, d2.path()).unwrap();

    let read = Manifest::read(&d1.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(read.records, m1.records);
    assert_eq!(read.train().count(), 2);
    assert_eq!(read.val().count(), 1);
    assert!(read.norm.image_scale > 0.0 && read.norm.image_scale != 1.0);
    assert_eq!(read.norm.image_scale.log2().fract(), 0.0);
    let label = read.load(&read.records[0]).unwrap().label.values;
    assert_eq!(read.norm.denormalize_image(&read.norm.normalize_image(&label)), label);
    for (a, b) in m1.records.iter().zip(&m2.records) {
        assert_eq!(a.seed, s.cfg.seed + a.idx as u64);
        for (pa, pb) in [(&a.v_true, &b.v_true), (&a.v_mig, &b.v_mig), (&a.label, &b.label)] {
            let (fa, fb) = (std::fs::read(d1.path().join(pa)).unwrap(), std::fs::read(d2.path().join(pb)).unwrap());
            assert_eq!(fa, fb, "{}", pa.display());
        }
    }

    let sample = read.load(&read.records[0]).unwrap();
    let again = model_and_migrate(&sample.v_true, &sample.v_mig, &read.geom, &read.lag, &read.sim).unwrap();
    assert_eq!(again.values, sample.label.values);
    assert_eq!(read_grid(&d1.path().join(&read.records[0].label)).unwrap().dims[0], 3);

}

fn depth_derivative(v: &VelocityField) -> Vec<f32> {
    let (nz, nx) = (v.grid.nz, v.grid.nx);
    let mut r = vec![0f32; nz * nx];
    for iz in 0..nz - 1 {
        for ix in 0..nx {
            r[iz * nx + ix] = v.values[(iz + 1) * nx + ix] - v.values[iz * nx + ix];
        }
    }
    r
}

#[test]
fn zero_lag_labels_track_reflectivity() {
    let cfg = ModelGenConfig { fold_amplitude: (0.0, 0.0), fault_prob: 0.0, salt_prob: 0.0, ..Default::default() };
    let geom = AcquisitionGeometry::surface(&cfg.grid, 8, 64, 2).unwrap();
    let seeds = 500..506u64;
    let n = seeds.clone().count() as f64;
    let mut total = 0.0;
    for seed in seeds {
        let s = make_sample(&cfg, seed, &geom, &LagAxis::default(), &SimConfig::default()).unwrap();
        total += correlation(s.label.zero_lag(), &depth_derivative(&s.v_true));
    }
    assert!(total / n > 0.3, "mean correlation {}", total / n);
}

#[test]
fn unwritable_output_directory_is_reported() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("not_a_dir");
    std::fs::write(&file, b"x").unwrap();
    let target = file.join("sub");
    let e = build_dataset(&s.cfg, 1, 0, &s.geom, &s.lag, &s.sim, &target).unwrap_err();
    assert!(e.to_string().contains("not_a_dir"), "{e}");
}
