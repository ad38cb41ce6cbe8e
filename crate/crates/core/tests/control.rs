use std::fs;

use merge_gate_core::control::*;
use merge_gate_core::data::{ByteVocab, Task};
use merge_gate_core::model::{Batch, ModelConfig, Model, ParamStore};
use merge_gate_core::numerics::{Graph, Tensor};
use merge_gate_core::Result;

fn scalar(g: &mut Graph<f64>, x: f64) -> merge_gate_core::numerics::Var {
    g.constant(Tensor::scalar(x))
}

#[test]
fn gate_regularizer_examples() {
    for (vals, want) in [([0.0; 4], 0.0), ([-30.0; 4], -30.0), ([0.0, 0.0, -30.0, -30.0], -15.0)] {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(vec![1, 4], &vals).unwrap());
        let l = gate_regularizer(&mut g, v, &[true; 4]).unwrap();
        assert_eq!(g.value(l).item(), want);
    }
}

#[test]
fn gate_regularizer_ignores_pads_and_averages_sequences() {
    let mut g = Graph::<f64>::new();
    // row 0: mean(-30, 0) = -15; row 1: mean(-30) = -30 (pads at -30 are ignored either way)
    let v = g.constant(Tensor::from_f64(vec![2, 3], &[-30.0, 0.0, -30.0, -30.0, -30.0, -30.0]).unwrap());
    let l = gate_regularizer(&mut g, v, &[true, true, false, true, false, false]).unwrap();
    assert_eq!(g.value(l).item(), -22.5);
    assert!(gate_regularizer(&mut g, v, &[false; 6]).is_err());
}

#[test]
fn score_regularizer_examples() {
    let m = 5.0;
    assert_eq!(clamped_score_mean(&[-3.0, 1.0, 5.0], m), 0.0);
    assert_eq!(clamped_score_mean(&[m + 2.0], m), 2.0);
    assert_eq!(clamped_score_mean(&[m - 10.0, m + 4.0], m), 2.0);
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(vec![2], &[m - 10.0, m + 4.0]).unwrap());
    let b = g.constant(Tensor::from_f64(vec![1], &[m + 2.0]).unwrap());
    let l = attention_score_regularizer(&mut g, &[a, b], m).unwrap();
    assert_eq!(g.value(l).item(), 2.0);
    assert!(attention_score_regularizer(&mut g, &[], m).is_err());
}

#[test]
fn total_loss_examples() {
    let mut g = Graph::<f64>::new();
    let ce = scalar(&mut g, 1.0);
    let t = total_loss(&mut g, ce, None, None, 0.0, 0.0).unwrap();
    assert_eq!(g.value(t).item(), 1.0);
    let lg = scalar(&mut g, -15.0);
    let t = total_loss(&mut g, ce, Some(lg), None, 0.01, 0.0).unwrap();
    assert!((g.value(t).item() - 0.85).abs() < 1e-12);
    let lg = scalar(&mut g, -10.0);
    let ls = scalar(&mut g, 0.5);
    let t = total_loss(&mut g, ce, Some(lg), Some(ls), 0.1, 5.0).unwrap();
    assert!((g.value(t).item() - 2.5).abs() < 1e-12);
}

#[test]
fn controller_first_step_hand_value() {
    let s = pi_update(PIControllerState::new(0.5, 0.9, 0.5, 1e-5), 0.0);
    assert!((s.p - 0.05).abs() < 1e-15);
    assert_eq!(s.i, 0.5);
    assert!((s.alpha - 0.025005).abs() < 1e-15);
}

#[test]
fn controller_replay_is_bitwise() {
    let stream: Vec<f64> = (0..500).map(|t| ((t as f64) * 0.173).sin().abs()).collect();
    let run = || {
        let mut s = PIControllerState::new(0.4, 0.9, 0.5, 1e-5);
        stream.iter().map(|&d| {
            s = pi_update(s, d);
            s.alpha.to_bits()
        }).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

// scalar AdamW written out by hand
fn adamw_oracle(mut x: f64, grads: &[f64], lr: f64, wd: f64, decay: bool) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        if decay {
            x -= lr * wd * x;
        }
        x -= lr * mhat / (vhat.sqrt() + eps);
    }
    x
}

#[test]
fn adamw_matches_scalar_oracle() {
    let mut p = ParamStore::<f64>::default();
    p.insert("w", Tensor::scalar(0.7));
    p.insert("m", Tensor::from_f64(vec![1, 1], &[0.7]).unwrap());
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    for _ in 0..2 {
        assert!(opt.step(&mut p, &[Some(vec![1.0]), Some(vec![1.0])], 1e-2).unwrap());
    }
    let want_vec = adamw_oracle(0.7, &[1.0, 1.0], 1e-2, 0.01, false);
    let want_mat = adamw_oracle(0.7, &[1.0, 1.0], 1e-2, 0.01, true);
    assert!((p.get("w").unwrap().item() - want_vec).abs() < 1e-14);
    assert!((p.get("m").unwrap().item() - want_mat).abs() < 1e-14);
    assert_eq!(opt.t, 2);
}

#[test]
fn adamw_zero_grad_zero_decay_is_identity() {
    let mut p = ParamStore::<f64>::default();
    p.insert("m", Tensor::from_f64(vec![2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
    let before = p.get("m").unwrap().clone();
    let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(cfg, &p);
    opt.step(&mut p, &[Some(vec![0.0; 4])], 0.1).unwrap();
    assert_eq!(p.get("m").unwrap(), &before);
}

#[test]
fn adamw_skips_non_finite() {
    let mut p = ParamStore::<f64>::default();
    p.insert("w", Tensor::scalar(1.0));
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    assert!(!opt.step(&mut p, &[Some(vec![f64::NAN])], 0.1).unwrap());
    assert_eq!((opt.t, opt.skipped), (0, 1));
    assert_eq!(p.get("w").unwrap().item(), 1.0);
}

#[test]
fn lr_schedules() {
    let s = LrSchedule::LinearWarmupDecay { peak: 1.0, warmup: 10 };
    assert_eq!(s.at(5, 110), 0.5);
    assert_eq!(s.at(10, 110), 1.0);
    assert_eq!(s.at(60, 110), 0.5);
    assert_eq!(s.at(110, 110), 0.0);
    let c = LrSchedule::Cosine { peak: 2.0, warmup: 0 };
    assert!((c.at(50, 100) - 1.0).abs() < 1e-12);
}

fn tiny_model(seed: u64) -> Model<f32> {
    let mut cfg = ModelConfig::tiny(ByteVocab::new(0).size());
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.n_heads = 2;
    Model::new(cfg, seed).unwrap()
}

fn train_cfg(steps: usize, alpha: AlphaMode) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        lr: LrSchedule::LinearWarmupDecay { peak: 1e-3, warmup: 2 },
        alpha,
        beta: 5.0,
        m: 5.0,
        reg_enable_step: 0,
        seed: 3,
        eval_every: 0,
        checkpoint_every: 0,
        optimizer: AdamWConfig::default(),
        grad_clip: Some(1.0),
    }
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny_model(1);
    let init = m.params.clone();
    let src = TaskSource { task: Task::SimpleVowel, seed: 1 };
    let s = train_loop(&mut m, &src, &train_cfg(0, AlphaMode::Fixed { alpha: 0.0 }), Some(dir.path()), false, None).unwrap();
    assert_eq!(s.steps_run, 0);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.trim(), METRICS_HEADER);
    let back = Model::<f32>::load(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(back.params.tensors(), init.tensors());
}

#[test]
fn one_step_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny_model(1);
    let src = TaskSource { task: Task::SimpleVowel, seed: 1 };
    train_loop(&mut m, &src, &train_cfg(1, AlphaMode::Fixed { alpha: 1e-4 }), Some(dir.path()), false, None).unwrap();
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(dir.path().join("checkpoint/model.bin").exists());
}

#[test]
fn no_gate_pressure_keeps_tokens() {
    let mut m = Model::<f32>::new(ModelConfig::tiny(ByteVocab::new(0).size()), 2).unwrap();
    let mut cfg = train_cfg(200, AlphaMode::Fixed { alpha: 0.0 });
    cfg.lr = LrSchedule::LinearWarmupDecay { peak: 2e-3, warmup: 20 };
    let src = TaskSource { task: Task::SimpleVowel, seed: 2 };
    let s = train_loop(&mut m, &src, &cfg, None, false, None).unwrap();
    let last = s.last.unwrap();
    assert!(last.delta_hat < 0.05, "delta_hat {}", last.delta_hat);
    assert_eq!(last.alpha, 0.0);
}

struct Truncated<'a> {
    inner: &'a dyn BatchSource,
    until: usize,
}

impl BatchSource for Truncated<'_> {
    fn batch(&self, step: usize, b: usize) -> Result<Option<Batch>> {
        if step >= self.until {
            return Ok(None);
        }
        self.inner.batch(step, b)
    }
}

#[test]
fn resume_continues_as_if_uninterrupted() {
    let cfg = {
        let mut c = train_cfg(8, AlphaMode::Controller { delta: 0.3, gamma: 0.9, k_p: 0.5, k_i: 1e-5 });
        c.reg_enable_step = 2;
        c
    };
    let src = TaskSource { task: Task::SimpleVowel, seed: 5 };

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = tiny_model(7);
    train_loop(&mut full, &src, &cfg, Some(full_dir.path()), false, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut part = tiny_model(7);
    let cut = Truncated { inner: &src, until: 5 };
    let s = train_loop(&mut part, &cut, &cfg, Some(dir.path()), false, None).unwrap();
    assert!(s.data_exhausted);
    assert_eq!(s.final_step, 5);
    let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.path().join("checkpoint/train_state.json")).unwrap()).unwrap();
    assert!(state.controller.unwrap().alpha > 0.0);

    let mut resumed = tiny_model(99);
    let s = train_loop(&mut resumed, &src, &cfg, Some(dir.path()), true, None).unwrap();
    assert_eq!((s.steps_run, s.final_step), (3, 8));
    for (a, b) in full.params.tensors().iter().zip(resumed.params.tensors()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(
        fs::read_to_string(full_dir.path().join("metrics.csv")).unwrap(),
        fs::read_to_string(dir.path().join("metrics.csv")).unwrap()
    );
    let a = fs::read_to_string(full_dir.path().join("checkpoint/train_state.json")).unwrap();
    let b = fs::read_to_string(dir.path().join("checkpoint/train_state.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_rejects_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let src = TaskSource { task: Task::SimpleVowel, seed: 5 };
    let cfg = train_cfg(1, AlphaMode::Fixed { alpha: 0.0 });
    train_loop(&mut tiny_model(1), &src, &cfg, Some(dir.path()), false, None).unwrap();
    let mut other = tiny_model(1);
    other.cfg.d_ff = 32;
    other.params = merge_gate_core::model::init_params(&other.cfg, 1).unwrap();
    assert!(train_loop(&mut other, &src, &train_cfg(2, AlphaMode::Fixed { alpha: 0.0 }), Some(dir.path()), true, None).is_err());
}

#[test]
fn finite_dataset_stops_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let src = DatasetSource { examples: Task::SimpleVowel.examples(1, 0, 10).unwrap() };
    let mut m = tiny_model(1);
    let s = train_loop(&mut m, &src, &train_cfg(100, AlphaMode::Fixed { alpha: 0.0 }), Some(dir.path()), false, None).unwrap();
    assert!(s.data_exhausted);
    assert_eq!(s.final_step, 2);
    assert!(dir.path().join("checkpoint/model.bin").exists());
}

#[test]
fn eval_hook_fires_on_schedule() {
    let mut cfg = train_cfg(4, AlphaMode::Fixed { alpha: 0.0 });
    cfg.eval_every = 2;
    let src = TaskSource { task: Task::SimpleVowel, seed: 1 };
    let mut seen = Vec::new();
    let mut hook = |_: &Model<f32>, s: usize| -> Result<()> {
        seen.push(s);
        Ok(())
    };
    train_loop(&mut tiny_model(1), &src, &cfg, None, false, Some(&mut hook)).unwrap();
    assert_eq!(seen, vec![2, 4]);
}

#[test]
fn config_validation() {
    let mut c = train_cfg(10, AlphaMode::Fixed { alpha: -1.0 });
    assert!(c.validate().is_err());
    c.alpha = AlphaMode::Controller { delta: 1.5, gamma: 0.9, k_p: 0.5, k_i: 1e-5 };
    assert!(c.validate().is_err());
    c.alpha = AlphaMode::Fixed { alpha: 0.0 };
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let json = r#"{"steps":1,"batch_size":2,"lr":{"kind":"constant","lr":0.1},"alpha":{"kind":"fixed","alpha":0.0},"bogus":1}"#;
    assert!(serde_json::from_str::<TrainConfig>(json).is_err());
}
