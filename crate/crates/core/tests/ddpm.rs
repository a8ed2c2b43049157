use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmb_autodiff::StepDecay;
use vmb_core::ddpm::{
    build_denoiser, ddpm_checkpoint_path, ddpm_loss, q_sample, refine_conditioned, reverse_step, standard_normal,
    train_ddpm, transition, DdpmTrainConfig, DenoiserArch, DenoiserModel, NoisePredictor, NoiseSchedule,
};
use vmb_core::domain::Grid2D;
use vmb_core::metrics::{correlation, total_variation};

/// Returns a fixed noise field regardless of input.
struct Fixed(Vec<f32>);

impl NoisePredictor for Fixed {
    fn predict_noise(&self, v_s: &[f32], _: usize, _: usize) -> vmb_core::Result<Vec<f32>> {
        assert_eq!(v_s.len(), self.0.len());
        Ok(self.0.clone())
    }
}

/// Knows the clean signal, so recovers the exact noise of any `q_sample`.
struct Oracle<'a> {
    v0: &'a [f32],
    sched: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict_noise(&self, v_s: &[f32], _: usize, s: usize) -> vmb_core::Result<Vec<f32>> {
        let ab = self.sched.alpha_bar_at(s);
        Ok(v_s
            .iter()
            .zip(self.v0)
            .map(|(&v, &x)| ((v as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32)
            .collect())
    }
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn cumulative_products_follow_the_recurrence() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 1000);
    for i in 1..s.steps() {
        assert!((s.alpha_bar[i] / s.alpha_bar[i - 1] - s.alpha[i]).abs() < 1e-12);
    }
    let product: f64 = s.beta.iter().map(|b| 1.0 - b).product();
    assert!((s.alpha_bar[999] - product).abs() < 1e-12);
    assert!(s.alpha_bar[999] < 5e-5, "{}", s.alpha_bar[999]);
}

proptest! {
    #[test]
    fn alpha_bar_strictly_decreases(steps in 1usize..400, start in 1e-5f64..0.5, extra in 0.0f64..0.49) {
        let s = NoiseSchedule::linear(steps, start, start + extra).unwrap();
        prop_assert!(s.alpha_bar[0] < 1.0);
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn noiseless_forward_process_only_rescales() {
    let s = NoiseSchedule::default();
    let v0 = [0.2f32, 0.9, 0.5];
    let out = q_sample(&v0, 300, &[0.0; 3], &s).unwrap();
    for (o, v) in out.iter().zip(v0) {
        assert!((o - s.alpha_bar_at(300).sqrt() as f32 * v).abs() < 1e-7);
    }
}

#[test]
fn final_step_is_almost_pure_noise() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v0 = field(&mut rng, 4096);
    let eps = standard_normal(&mut rng, 4096);
    let vs = q_sample(&v0, 1000, &eps, &s).unwrap();
    assert!(correlation(&vs, &eps) > 0.999);
}

#[test]
fn forward_marginals_match_their_moments() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 10_000;
    for step in [10, 250, 700] {
        let ab = s.alpha_bar_at(step);
        let v0 = [0.0f32, 0.8];
        let (mut sum, mut sq) = ([0.0f64; 2], [0.0f64; 2]);
        for _ in 0..draws {
            let x = q_sample(&v0, step, &standard_normal(&mut rng, 2), &s).unwrap();
            for k in 0..2 {
                sum[k] += x[k] as f64;
                sq[k] += (x[k] as f64).powi(2);
            }
        }
        for k in 0..2 {
            let mean = sum[k] / draws as f64;
            let var = sq[k] / draws as f64 - mean * mean;
            assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "step {step}: var {var} vs {}", 1.0 - ab);
            let expect = ab.sqrt() * v0[k] as f64;
            // Mean error relative to the marginal spread when the mean is 0.
            let scale = expect.abs().max((1.0 - ab).sqrt());
            assert!((mean - expect).abs() < 0.05 * scale, "step {step}: mean {mean} vs {expect}");
        }
    }
}

#[test]
fn oracle_single_step_recovers_the_clean_model() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v0 = field(&mut rng, 2048);
    let eps = standard_normal(&mut rng, 2048);
    let v1 = q_sample(&v0, 1, &eps, &s).unwrap();
    let out = reverse_step(&v1, 1, 1, &Fixed(eps), &s, None).unwrap();
    assert!(mse(&out, &v0) < 1e-5, "{}", mse(&out, &v0));
}

#[test]
fn zero_noise_prediction_is_a_pure_rescale() {
    let s = NoiseSchedule::default();
    let v = [0.3f32, -1.2, 0.7];
    let out = reverse_step(&v, 1, 400, &Fixed(vec![0.0; 3]), &s, None).unwrap();
    let k = 1.0 / s.alpha[399].sqrt();
    for (o, x) in out.iter().zip(v) {
        assert!((*o as f64 - k * x as f64).abs() < 1e-6);
    }
}

#[test]
fn jump_from_an_unnoised_seed_with_zero_prediction_returns_the_guess() {
    let s = NoiseSchedule::default();
    let v = [0.25f32, 0.5, 0.75];
    let seeded = q_sample(&v, 50, &[0.0; 3], &s).unwrap();
    let back = transition(&seeded, 50, 0, &[0.0; 3], &s, None).unwrap();
    for (a, b) in back.iter().zip(v) {
        assert!((a - b).abs() < 1e-6);
    }
    // One ancestral step keeps the closed-form factor √ᾱ_s / √α_s.
    let one = transition(&seeded, 50, 49, &[0.0; 3], &s, None).unwrap();
    let k = s.alpha_bar_at(50).sqrt() / s.alpha[49].sqrt();
    for (a, b) in one.iter().zip(v) {
        assert!((*a as f64 - k * b as f64).abs() < 1e-6);
    }
}

#[test]
fn light_refinement_with_an_oracle_is_near_identity() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let guess = field(&mut rng, 1024);
    let oracle = Oracle { v0: &guess, sched: &s };
    for (s_cond, k) in [(1, 1), (50, 1), (50, 5)] {
        let out = refine_conditioned(&guess, s_cond, k, &oracle, &s, &mut rng).unwrap();
        assert!(mse(&out, &guess) < 1e-3, "s_cond {s_cond}, k {k}: {}", mse(&out, &guess));
    }
}

#[test]
fn refinement_is_deterministic_per_seed() {
    let s = NoiseSchedule::default();
    let guess = vec![0.5f32; 64];
    let model = Fixed(vec![0.1; 64]);
    let run = |seed| refine_conditioned(&guess, 50, 2, &model, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
    assert!(refine_conditioned(&guess, 0, 1, &model, &s, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    assert!(refine_conditioned(&guess, 5, 0, &model, &s, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
}

fn tiny_arch() -> DenoiserArch {
    DenoiserArch { grid: Grid2D { nz: 16, nx: 16, dz: 1.0, dx: 1.0 }, widths: [8, 8, 16, 16], emb_dim: 16 }
}

/// Blocky layered models on the tiny grid.
fn corpus(n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let depth = rng.random_range(4..12);
            let (a, b): (f32, f32) = (rng.random_range(0.1..0.4), rng.random_range(0.6..0.9));
            (0..256).map(|i| if i / 16 < depth { a } else { b }).collect()
        })
        .collect()
}

#[test]
fn initial_loss_is_unit_and_independent_of_batch_order() {
    let s = NoiseSchedule::default();
    let model = build_denoiser(&tiny_arch(), 0).unwrap();
    let data = corpus(8, 1);
    let order: Vec<usize> = (0..8).collect();
    let shuffled = vec![3, 7, 0, 5, 1, 6, 2, 4];
    let a = ddpm_loss(&model, &data, &order, &s, 5, 0).unwrap();
    let b = ddpm_loss(&model, &data, &shuffled, &s, 5, 0).unwrap();
    assert!((a - 1.0).abs() < 0.2, "initial loss {a}");
    assert!((a - b).abs() < 1e-6 * a, "{a} vs {b}");
}

#[test]
fn training_lowers_the_noise_prediction_loss() {
    let s = NoiseSchedule::default();
    let mut model = build_denoiser(&tiny_arch(), 0).unwrap();
    let data = corpus(16, 2);
    let cfg = DdpmTrainConfig { epochs: 150, batch_size: 4, lr: StepDecay::constant(2e-3), seed: 3 };
    let dir = tempfile::tempdir().unwrap();
    let losses = train_ddpm(&mut model, &data, &s, &cfg, dir.path()).unwrap();
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.6 * losses[0], "{} → {tail}", losses[0]);
    let back = DenoiserModel::load(&ddpm_checkpoint_path(dir.path())).unwrap();
    assert_eq!(back.arch, model.arch);
    assert!(back.params.iter().zip(model.params.iter()).all(|(a, b)| a.name == b.name && a.value == b.value));

    // A trained prior pulls a noisy blocky model towards the corpus when the
    // seed noise matches the corruption.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noisy: Vec<f32> = data[0].iter().map(|&v| v + 0.05 * rng.random_range(-1.0f32..1.0)).collect();
    let refined = refine_conditioned(&noisy, 10, 1, &model, &s, &mut rng).unwrap();
    assert!(total_variation(&refined, 16, 16) < total_variation(&noisy, 16, 16));
}

#[test]
fn training_rejects_mismatched_corpora() {
    let mut model = build_denoiser(&tiny_arch(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = DdpmTrainConfig::default();
    let s = NoiseSchedule::default();
    assert!(train_ddpm(&mut model, &[vec![0.0; 10]], &s, &cfg, dir.path()).is_err());
    assert!(train_ddpm(&mut model, &[], &s, &cfg, dir.path()).is_err());
}
