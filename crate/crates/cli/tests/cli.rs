use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vmb_core::domain::read_grid;

const TINY: &str = r#"
seed = 5
out_dir = "out"

[grid]
nz = 32
nx = 32

[generator]
layers = [2, 4]
fold_wavelength = [32.0, 64.0]
salt_radius = [3.0, 5.0]
smooth_sigma = 3.0

[geometry]
sources = 2
receivers = 16

[sim]
nt = 400
top_mute = 4

[dataset]
n_train = 1
n_val = 1

[operator]
modes = [3, 3]
lift = 4
encoder = [4, 4, 8, 8]
decoder = [8, 4, 4, 4]
blocks = 1
epochs = 2
batch_size = 1

[ddpm]
steps = 20
widths = [4, 4, 8, 8]
emb_dim = 8
epochs = 2
batch_size = 1
samples = 2

[inversion]
iterations = 6
diffuse_every = 2
s_cond = 5
overlap = 0.5
spectrum_columns = [3, 20]
"#;

fn vmb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmb")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vmb(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    path
}

/// Every `.velb` below `root`, relative to it, with its bytes.
fn velb_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "velb") {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn full_pipeline(cfg: &str) {
    for cmd in [
        vec!["gen-data"],
        vec!["train-op"],
        vec!["train-ddpm"],
        vec!["sample-ddpm"],
        vec!["invert"],
        vec!["invert", "--with-ddpm"],
        vec!["invert", "--patched"],
        vec!["rtm"],
    ] {
        let mut args = cmd.clone();
        args.extend(["--config", cfg]);
        ok(&args);
    }
}

#[test]
fn pipeline_outputs_are_complete_and_bit_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = "[spectrum]\ninput = \"out/invert/v_inverted.velb\"\ncolumns = [1]\n";
    let (cfg_a, cfg_b) = (write_config(a.path(), extra), write_config(b.path(), extra));
    full_pipeline(cfg_a.to_str().unwrap());
    full_pipeline(cfg_b.to_str().unwrap());
    ok(&["spectrum", "--config", cfg_a.to_str().unwrap()]);

    let out = a.path().join("out");
    let manifest = fs::read_to_string(out.join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2);
    assert_eq!(fs::read_to_string(out.join("operator/train_log.csv")).unwrap().lines().count(), 1 + 2);
    for dir in ["data", "operator", "ddpm", "ddpm/samples", "invert", "invert_ddpm", "invert_patched", "rtm", "spectrum"] {
        assert!(out.join(dir).join("config.toml").is_file(), "{dir} has no config copy");
    }
    for dir in ["invert", "invert_ddpm", "invert_patched"] {
        let d = out.join(dir);
        let v = read_grid(&d.join("v_inverted.velb")).unwrap().into_velocity(10.0, 10.0).unwrap();
        assert_eq!((v.grid.nz, v.grid.nx), (32, 32));
        let loss = fs::read_to_string(d.join("loss.csv")).unwrap();
        assert!(loss.starts_with("iter,loss,lr,refined\n"));
        assert_eq!(loss.lines().count(), 1 + 6);
        for f in ["spectrum_mean.csv", "spectrum_col3.csv", "spectrum_col20.csv", "summary.csv"] {
            assert!(d.join(f).is_file(), "{dir}/{f}");
        }
    }
    let refined = fs::read_to_string(out.join("invert_ddpm/loss.csv")).unwrap();
    assert!(refined.lines().skip(1).any(|l| l.ends_with(",1")));
    assert_ne!(fs::read(out.join("invert/v_inverted.velb")).unwrap(), fs::read(out.join("invert_ddpm/v_inverted.velb")).unwrap());
    let image = read_grid(&out.join("rtm/image.velb")).unwrap().into_image(10.0, 10.0, 8e-3).unwrap();
    assert_eq!(image.n_lag, 3);
    assert!(out.join("spectrum/spectrum_col1.csv").is_file());

    let (fa, fb) = (velb_files(&out), velb_files(&b.path().join("out")));
    assert!(fa.len() >= 12, "{} VELB files", fa.len());
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{} differs between identical runs", name.display());
    }
}

#[test]
fn resumed_training_continues_the_epoch_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&["gen-data", "--config", cfg]);
    ok(&["train-op", "--config", cfg]);
    let log = dir.path().join("out/operator/train_log.csv");
    let before = fs::read_to_string(&log).unwrap();
    fs::write(dir.path().join("run.toml"), TINY.replace("epochs = 2\nbatch_size = 1\n\n[ddpm]", "epochs = 4\nbatch_size = 1\n\n[ddpm]")).unwrap();
    ok(&["train-op", "--config", cfg, "--resume"]);
    let after = fs::read_to_string(&log).unwrap();
    assert_eq!(after.lines().count(), 1 + 4);
    assert!(after.starts_with(&before), "resumed log rewrote earlier epochs");
    assert!(after.lines().last().unwrap().starts_with("3,"));
}

#[test]
fn divergent_training_exits_with_the_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&["gen-data", "--config", cfg]);
    fs::write(dir.path().join("run.toml"), TINY.replace("epochs = 2\nbatch_size = 1\n\n[ddpm]", "epochs = 3\nbatch_size = 1\nlr = 1e30\n\n[ddpm]")).unwrap();
    let out = vmb(&["train-op", "--config", cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[rtm]\nvelocity = \"v.velb\"\n");
    let out = vmb(&["rtm", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("velocity"), "{}", stderr(&out));
}

#[test]
fn cfl_violation_names_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "").to_str().unwrap().to_owned();
    fs::write(&cfg, TINY.replace("nt = 400", "nt = 400\ndt = 4e-3")).unwrap();
    let out = vmb(&["rtm", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("CFL") && stderr(&out).contains("v_max"), "{}", stderr(&out));
    assert!(!dir.path().join("out/rtm/image.velb").exists());
}

#[test]
fn unwritable_output_is_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY.replace("out_dir = \"out\"", "out_dir = \"blocker/out\"")).unwrap();
    let out = vmb(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("blocker/out"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = vmb(&["invert", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("manifest.csv"), "{}", stderr(&out));
    let out = vmb(&["spectrum", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    let out = vmb(&["rtm", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/run.toml"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(vmb(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vmb(&["invert", "--jobs", "many"]).status.code(), Some(1));
    assert_eq!(vmb(&["--help"]).status.code(), Some(0));
}
