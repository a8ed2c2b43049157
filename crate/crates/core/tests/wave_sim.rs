use std::time::Instant;

use vmb_core::domain::{AcquisitionGeometry, Grid2D, ShotGather, VelocityField};
use vmb_core::metrics::correlation;
use vmb_core::wave_sim::{
    image_shot, migrate_shot, model_and_migrate, model_gather, ricker_wavelet, simulate_shot, subtract,
    zero_lag_image, LagAxis, SimConfig,
};

fn two_layer(grid: Grid2D, depth: usize, v1: f32, v2: f32) -> VelocityField {
    let mut v = VelocityField::constant(grid, v1);
    for iz in depth..grid.nz {
        for ix in 0..grid.nx {
            v.values[iz * grid.nx + ix] = v2;
        }
    }
    v
}

fn smooth_two_layer(grid: Grid2D, depth: usize, v1: f32, v2: f32, width: f64) -> VelocityField {
    let mut v = VelocityField::constant(grid, v1);
    for iz in 0..grid.nz {
        let s = 0.5 * (1.0 + ((iz as f64 - depth as f64 + 0.5) / width).tanh());
        for ix in 0..grid.nx {
            v.values[iz * grid.nx + ix] = v1 + (v2 - v1) * s as f32;
        }
    }
    v
}

fn rms(x: &[f32]) -> f64 {
    (x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64).sqrt()
}

/// Ricker wavelet convolved with the 2D Green's function `H(t−T)/(2π√(t²−T²))`
/// arriving at `T`, with the singular kernel integrated exactly per sample.
fn analytic_trace(wavelet: &[f32], dt: f64, arrival: f64) -> Vec<f64> {
    let nt = wavelet.len();
    let kernel: Vec<f64> = (0..nt)
        .map(|k| {
            let (a, b) = ((k as f64 - 0.5) * dt, (k as f64 + 0.5) * dt);
            let (a, b) = (a.max(arrival), b.max(arrival));
            ((b / arrival).acosh() - (a / arrival).acosh()) / (2.0 * std::f64::consts::PI)
        })
        .collect();
    (0..nt)
        .map(|n| (0..=n).map(|k| kernel[k] * wavelet[n - k] as f64).sum())
        .collect()
}

fn ncc(a: &[f64], b: &[f32]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, &y)| x * y as f64).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|&y| y as f64 * y as f64).sum();
    ab / (aa * bb).sqrt()
}

#[test]
fn homogeneous_first_arrival_matches_distance_over_velocity() {
    let t = Instant::now();
    // Source and receiver far from the top and bottom tapers, whose grazing
    // reflections would otherwise arrive right behind the direct wave.
    let grid = Grid2D::new(100, 140, 10.0, 10.0).unwrap();
    let v = VelocityField::constant(grid, 2000.0);
    let cfg = SimConfig { nt: 700, ..Default::default() };
    let geom = AcquisitionGeometry {
        sources: vec![(50, 15)],
        receivers: vec![(50, 115), (50, 16)],
    };
    let (gather, _) = simulate_shot(&v, &geom, 0, &cfg).unwrap();
    let w = ricker_wavelet(cfg.f_peak, cfg.nt, cfg.dt).unwrap();
    // Window: the direct arrival plus one wavelet length.
    let window = 620;
    let trace = &gather.trace(0)[..window];
    // Best-fitting arrival time over a fine search, 0.1·dt resolution.
    let (mut best, mut best_t) = (f64::MIN, 0.0);
    for k in 0..=400 {
        let arrival = 0.48 + k as f64 * 1e-4;
        let c = ncc(&analytic_trace(&w[..window], cfg.dt, arrival), trace);
        if c > best {
            (best, best_t) = (c, arrival);
        }
    }
    let expected = 1000.0 / 2000.0;
    assert!(best > 0.98, "waveform fit {best}");
    assert!((best_t - expected).abs() <= 2.0 * cfg.dt, "arrival {best_t} vs {expected}");
    assert!(t.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn symmetric_receivers_record_identical_traces() {
    let grid = Grid2D::new(32, 65, 10.0, 10.0).unwrap();
    let v = VelocityField::constant(grid, 2200.0);
    let cfg = SimConfig { nt: 400, ..Default::default() };
    let geom = AcquisitionGeometry {
        sources: vec![(10, 32)],
        receivers: vec![(10, 12), (10, 52)],
    };
    let (g, _) = simulate_shot(&v, &geom, 0, &cfg).unwrap();
    let (a, b) = (g.trace(0), g.trace(1));
    let peak = a.iter().fold(0f32, |m, x| m.max(x.abs()));
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= 1e-5 * peak, "{x} vs {y}");
    }
}

#[test]
fn energy_decays_after_the_wave_leaves() {
    let t = Instant::now();
    let grid = Grid2D::new(64, 128, 10.0, 10.0).unwrap();
    let v = VelocityField::constant(grid, 2000.0);
    let cfg = SimConfig { nt: 1200, ..Default::default() };
    let e = vmb_core::wave_sim::energy_history(&v, (2, 64), &cfg).unwrap().discrete;
    let tail = &e[e.len() * 4 / 5..];
    for w in tail.windows(2) {
        assert!(w[1] <= w[0], "energy rose from {} to {}", w[0], w[1]);
    }
    let peak = e.iter().cloned().fold(0.0, f64::max);
    assert!(tail[tail.len() - 1] < 1e-2 * peak);
    assert!(t.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn cfl_violation_is_rejected_before_stepping() {
    let grid = Grid2D::new(16, 16, 10.0, 10.0).unwrap();
    let v = VelocityField::constant(grid, 8000.0);
    let geom = AcquisitionGeometry::surface(&grid, 1, 4, 2).unwrap();
    let err = simulate_shot(&v, &geom, 0, &SimConfig::default()).unwrap_err();
    assert!(err.to_string().contains("CFL"), "{err}");
}

struct Scene {
    v_true: VelocityField,
    v_mig: VelocityField,
    geom: AcquisitionGeometry,
    cfg: SimConfig,
    lag: LagAxis,
}

fn scene(n_src: usize) -> Scene {
    let grid = Grid2D::new(64, 128, 10.0, 10.0).unwrap();
    Scene {
        v_true: two_layer(grid, 32, 2000.0, 2800.0),
        v_mig: smooth_two_layer(grid, 32, 2000.0, 2800.0, 8.0),
        geom: AcquisitionGeometry::surface(&grid, n_src, 64, 2).unwrap(),
        cfg: SimConfig::default(),
        lag: LagAxis::default(),
    }
}

#[test]
fn zero_lag_slice_equals_the_conventional_image() {
    let s = scene(4);
    for src in 0..2 {
        let observed = model_gather(&s.v_true, &s.geom, src, &s.cfg).unwrap();
        let (bg, snaps) = simulate_shot(&s.v_mig, &s.geom, src, &s.cfg).unwrap();
        let residual = subtract(&observed, &bg);
        let ext = migrate_shot(&s.v_mig, &residual, &snaps, &s.geom, &s.lag, &s.cfg).unwrap();
        let conventional = zero_lag_image(&s.v_mig, &residual, &s.geom, src, &s.cfg).unwrap();
        let num: f64 = ext.zero_lag().iter().zip(&conventional).map(|(a, b)| (a - b) as f64).map(|d| d * d).sum();
        let den: f64 = conventional.iter().map(|&b| b as f64 * b as f64).sum();
        assert!(den > 0.0);
        assert!((num / den).sqrt() < 1e-5, "relative difference {}", (num / den).sqrt());
    }
}

#[test]
fn migration_is_linear_in_the_receiver_data() {
    let s = scene(2);
    let (g1, snaps) = simulate_shot(&s.v_true, &s.geom, 0, &s.cfg).unwrap();
    let g2 = ShotGather {
        traces: g1.traces.iter().enumerate().map(|(i, &x)| x * ((i % 7) as f32 - 3.0)).collect(),
        ..g1.clone()
    };
    let (a, b) = (0.7f32, -1.9f32);
    let combo = ShotGather {
        traces: g1.traces.iter().zip(&g2.traces).map(|(&x, &y)| a * x + b * y).collect(),
        ..g1.clone()
    };
    let mig = |g: &ShotGather| migrate_shot(&s.v_true, g, &snaps, &s.geom, &s.lag, &s.cfg).unwrap().values;
    let (i1, i2, ic) = (mig(&g1), mig(&g2), mig(&combo));
    let expect: Vec<f32> = i1.iter().zip(&i2).map(|(x, y)| a * x + b * y).collect();
    let diff: Vec<f32> = ic.iter().zip(&expect).map(|(x, y)| x - y).collect();
    assert!(rms(&diff) < 1e-5 * rms(&expect), "{} vs {}", rms(&diff), rms(&expect));
}

#[test]
fn homogeneous_models_give_a_near_zero_image() {
    let s = scene(4);
    let grid = s.v_true.grid;
    let flat = VelocityField::constant(grid, 2000.0);
    let empty = model_and_migrate(&flat, &flat, &s.geom, &s.lag, &s.cfg).unwrap();
    let layered = model_and_migrate(&two_layer(grid, 32, 2000.0, 2800.0), &flat, &s.geom, &s.lag, &s.cfg).unwrap();
    assert!(rms(&empty.values) < 0.01 * rms(&layered.values));
}

#[test]
fn reflector_images_at_the_interface_depth() {
    let t = Instant::now();
    let s = scene(4);
    let img = model_and_migrate(&s.v_true, &s.v_mig, &s.geom, &s.lag, &s.cfg).unwrap();
    assert!(t.elapsed().as_secs_f64() < 30.0, "4-shot stack took {:?}", t.elapsed());
    let z0 = img.zero_lag();
    let nx = img.grid.nx;
    // Skip the shallow rows where the source footprint lives.
    let (mut best, mut row) = (0f32, 0);
    for iz in 8..img.grid.nz {
        for ix in 16..nx - 16 {
            if z0[iz * nx + ix].abs() > best {
                (best, row) = (z0[iz * nx + ix].abs(), iz);
            }
        }
    }
    assert!((row as isize - 32).abs() <= 3, "max at row {row}");
}

#[test]
fn denser_source_sampling_barely_changes_the_stack() {
    let a = scene(8);
    let b = scene(16);
    let ia = model_and_migrate(&a.v_true, &a.v_mig, &a.geom, &a.lag, &a.cfg).unwrap();
    let ib = model_and_migrate(&b.v_true, &b.v_mig, &b.geom, &b.lag, &b.cfg).unwrap();
    let c = correlation(&ia.values, &ib.values);
    assert!(c > 0.95, "correlation {c}");
}

#[test]
fn stacking_is_deterministic() {
    let s = scene(2);
    let a = model_and_migrate(&s.v_true, &s.v_mig, &s.geom, &s.lag, &s.cfg).unwrap();
    let b = model_and_migrate(&s.v_true, &s.v_mig, &s.geom, &s.lag, &s.cfg).unwrap();
    assert_eq!(a, b);
    let single = image_shot(&s.v_true, &s.v_mig, &s.geom, 0, &s.lag, &s.cfg).unwrap();
    assert_eq!(single.n_lag, 3);
}

#[test]
fn recorded_gathers_reproduce_the_modelled_stack() {
    let s = scene(2);
    let gathers: Vec<ShotGather> = (0..2).map(|i| model_gather(&s.v_true, &s.geom, i, &s.cfg).unwrap()).collect();
    let a = vmb_core::wave_sim::migrate_gathers(&s.v_mig, &gathers, &s.geom, &s.lag, &s.cfg).unwrap();
    let b = model_and_migrate(&s.v_true, &s.v_mig, &s.geom, &s.lag, &s.cfg).unwrap();
    assert_eq!(a, b);
    assert!(vmb_core::wave_sim::migrate_gathers(&s.v_mig, &gathers[..1], &s.geom, &s.lag, &s.cfg).is_err());
}
