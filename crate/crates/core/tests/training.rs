use std::fs;
use std::path::Path;

use imim_core::checkpoint::Checkpoint;
use imim_core::exec::Execution;
use imim_core::model::MimConfig;
use imim_core::training::{adamw_step, checkpoint_path, load_dataset, pretrain, train, AdamState, AdamW, Corpus, RunConfig, TrainState, METRICS_HEADER};
use imim_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_run() -> RunConfig {
    RunConfig {
        model: MimConfig {
            embed_dim: 16,
            encoder_depth: 1,
            n_heads: 2,
            patch_size: 8,
            channels: 4,
            image_height: 32,
            image_width: 32,
            ..MimConfig::default()
        },
        batch_size: 4,
        steps: 8,
        synthetic_train: 12,
        synthetic_test: 4,
        checkpoint_every: 4,
        seed: 11,
        ..RunConfig::default()
    }
}

fn corpus(cfg: &RunConfig) -> Corpus {
    Corpus::new(&load_dataset(cfg, Execution::Sequential).unwrap(), cfg).unwrap()
}

/// Textbook Adam written against plain slices.
fn adam_oracle(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64, b1: f64, b2: f64, eps: f64) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

#[test]
fn adamw_without_decay_matches_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hp = AdamW {
        weight_decay: 0.0,
        lr: 0.01,
        ..AdamW::default()
    };
    let init: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut p = Tensor::new([3, 4], init.clone()).unwrap();
    let mut state = AdamState::new([p.shape()]);
    let (mut op, mut om, mut ov) = (init, vec![0.0; 12], vec![0.0; 12]);
    for t in 1..=10 {
        let g: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        adamw_step([("w", &mut p)], &[Tensor::new([3, 4], g.clone()).unwrap()], &mut state, &hp).unwrap();
        adam_oracle(&mut op, &g, &mut om, &mut ov, t, hp.lr, hp.beta1, hp.beta2, hp.eps);
        for (a, b) in p.data().iter().zip(&op) {
            assert!((a - b).abs() <= 1e-12, "step {t}: {a} vs {b}");
        }
    }
    assert_eq!(state.t, 10);
}

#[test]
fn decay_is_decoupled_from_the_gradient() {
    let hp = AdamW::default();
    // Zero gradient: only the decay term acts.
    let mut p = Tensor::new([2], vec![1.0, -3.0]).unwrap();
    let mut state = AdamState::new([p.shape()]);
    adamw_step([("w", &mut p)], &[Tensor::zeros(vec![2])], &mut state, &hp).unwrap();
    let f = 1.0 - hp.lr * hp.weight_decay;
    for (got, want) in p.data().iter().zip([f, -3.0 * f]) {
        assert!((got - want).abs() <= 1e-15);
    }

    // First step with a gradient moves by lr·sign(g) plus the decay term,
    // whatever the gradient's magnitude.
    for g in [1e-3, 5.0] {
        let mut p = Tensor::new([1], vec![0.9]).unwrap();
        let mut state = AdamState::new([p.shape()]);
        adamw_step([("w", &mut p)], &[Tensor::new([1], vec![g]).unwrap()], &mut state, &hp).unwrap();
        let expected = 0.9 - hp.lr * hp.weight_decay * 0.9 - hp.lr * g / (g + hp.eps);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }
}

#[test]
fn pure_decay_at_the_small_learning_rate() {
    let hp = AdamW {
        lr: 1e-5,
        weight_decay: 0.005,
        ..AdamW::default()
    };
    let mut p = Tensor::new([1], vec![1.0]).unwrap();
    let mut state = AdamState::new([p.shape()]);
    adamw_step([("w", &mut p)], &[Tensor::zeros(vec![1])], &mut state, &hp).unwrap();
    assert!((p.data()[0] - (1.0 - 5e-8)).abs() <= 1e-16);
}

#[test]
fn non_finite_gradient_leaves_state_untouched() {
    let mut p = Tensor::new([2], vec![1.0, 2.0]).unwrap();
    let mut state = AdamState::new([p.shape()]);
    let bad = Tensor::new([2], vec![0.5, f64::NAN]).unwrap();
    let err = adamw_step([("w", &mut p)], &[bad], &mut state, &AdamW::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    assert_eq!(p.data(), &[1.0, 2.0]);
    assert_eq!(state.t, 0);
    assert!(state.m[0].data().iter().all(|&x| x == 0.0));
}

#[test]
fn loss_halves_on_a_small_corpus() {
    let cfg = RunConfig {
        steps: 200,
        synthetic_train: 8,
        ..small_run()
    };
    let out = pretrain(&cfg, &corpus(&cfg), None, Execution::Parallel).unwrap();
    let first = out.metrics[0].loss;
    let tail: f64 = out.metrics[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(out.metrics.iter().all(|r| r.loss.is_finite()));
    assert!(tail < 0.5 * first, "loss {first} -> {tail}");
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let mut out: Vec<_> = files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.push(("metrics.csv".into(), fs::read(dir.join("metrics.csv")).unwrap()));
    out
}

#[test]
fn identical_configs_write_identical_bytes() {
    let cfg = small_run();
    let c = corpus(&cfg);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pretrain(&cfg, &c, Some(a.path()), Execution::Parallel).unwrap();
    pretrain(&cfg, &c, Some(b.path()), Execution::Parallel).unwrap();
    let (fa, fb) = (read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["step-000000.imim", "step-000004.imim", "step-000008.imim", "metrics.csv"]);
    assert_eq!(fa, fb);
}

#[test]
fn parallel_matches_sequential_bitwise() {
    let cfg = small_run();
    let c = corpus(&cfg);
    let p = pretrain(&cfg, &c, None, Execution::Parallel).unwrap();
    let s = pretrain(&cfg, &c, None, Execution::Sequential).unwrap();
    assert_eq!(p.metrics, s.metrics);
    assert_eq!(p.state, s.state);
}

#[test]
fn seeds_change_the_run() {
    let cfg = small_run();
    let other = RunConfig { seed: 12, ..cfg.clone() };
    let a = pretrain(&cfg, &corpus(&cfg), None, Execution::Parallel).unwrap();
    let b = pretrain(&other, &corpus(&other), None, Execution::Parallel).unwrap();
    assert_ne!(a.metrics, b.metrics);
}

#[test]
fn resume_is_bit_identical() {
    let cfg = small_run();
    let c = corpus(&cfg);
    let full_dir = tempfile::tempdir().unwrap();
    let full = pretrain(&cfg, &c, Some(full_dir.path()), Execution::Parallel).unwrap();

    let ck = Checkpoint::load(checkpoint_path(full_dir.path(), 4)).unwrap();
    let (state, saved_cfg) = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(saved_cfg, cfg);
    assert_eq!(state.step, 4);
    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed = train(&saved_cfg, &c, state, Some(resumed_dir.path()), Execution::Parallel).unwrap();

    assert_eq!(resumed.metrics, full.metrics[4..]);
    assert_eq!(resumed.state, full.state);
    assert_eq!(
        fs::read(checkpoint_path(full_dir.path(), 8)).unwrap(),
        fs::read(checkpoint_path(resumed_dir.path(), 8)).unwrap()
    );
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let cfg = RunConfig { steps: 0, ..small_run() };
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&cfg, &corpus(&cfg), Some(dir.path()), Execution::Parallel).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), format!("{METRICS_HEADER}\n"));
    let ck = Checkpoint::load(checkpoint_path(dir.path(), 0)).unwrap();
    let (state, _) = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(state, TrainState::new(&cfg).unwrap());
}

#[test]
fn metrics_rows_have_empty_seconds_by_default() {
    let cfg = RunConfig { steps: 2, ..small_run() };
    let dir = tempfile::tempdir().unwrap();
    pretrain(&cfg, &corpus(&cfg), Some(dir.path()), Execution::Parallel).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 4);
        assert_eq!(f[0], (i + 1).to_string());
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        assert_eq!(f[2].parse::<f64>().unwrap(), cfg.learning_rate);
        assert_eq!(f[3], "");
    }
}

#[test]
fn mismatched_state_is_rejected() {
    let cfg = small_run();
    let other = RunConfig {
        model: MimConfig { embed_dim: 8, ..cfg.model.clone() },
        ..cfg.clone()
    };
    let state = TrainState::new(&other).unwrap();
    assert!(matches!(train(&cfg, &corpus(&cfg), state, None, Execution::Sequential), Err(Error::Config(_))));
}

#[test]
fn rgb_model_trains_on_an_rgb_ir_corpus() {
    let cfg = small_run();
    let rgb = RunConfig {
        model: MimConfig { channels: 3, ..cfg.model.clone() },
        steps: 2,
        ..cfg.clone()
    };
    let ds = load_dataset(&cfg, Execution::Sequential).unwrap();
    let c = Corpus::new(&ds, &rgb).unwrap();
    assert_eq!(c.train_grids()[0].channels(), 3);
    pretrain(&rgb, &c, None, Execution::Parallel).unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        RunConfig { batch_size: 0, ..small_run() },
        RunConfig { mask_ratio: 1.0, ..small_run() },
        RunConfig { learning_rate: -1.0, ..small_run() },
    ] {
        assert!(matches!(TrainState::new(&cfg), Err(Error::Config(_))));
    }
}
